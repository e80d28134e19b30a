//! Experiment orchestration: configuration, dataset synthesis, training,
//! reconstruction with every method, and the results table.
//!
//! A run directory holds everything one experiment produces:
//!
//! ```text
//! <run>/config.txt                      resolved configuration
//! <run>/data/{train,validation,test}/   manifest.txt + record_NNNNN.bdgd
//! <run>/data/shepp_logan.bdgd           Shepp–Logan test record
//! <run>/models/<method>/cascade.ckpt    per-block checkpoint, train.log
//! <run>/recon/<method>/*.bdgd           stored reconstructions
//! <run>/results.txt, results.csv        evaluation table
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::{lambda_sweep, best_of_sweep, TVConfig, TvSolver};
use crate::cascade::{Arch, Cascade, Mode};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inference::{mc_predict_batch, PredictiveResult};
use crate::metrics::psnr;
use crate::phantoms::{overlay_text, random_ellipse_phantom_with, shepp_logan};
use crate::rng::{purpose, stream_rng};
use crate::tensor::Tensor;
use crate::tomo::{add_noise_with, fbp, load_image, save_image, Geometry, RayTransform, Sinogram};
use crate::training::{train_cascade, BlockDataset, EpochStats, TrainConfig, TrainReport};

/// Compute budget of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 64 x 64 images, 500/50 samples, 30 epochs, shallower cascades.
    Desk,
    /// 128 x 128 images, 4000/100 samples, 150 epochs.
    Full,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Config(format!("scale must be `desk` or `full`, got {s:?}"))),
        }
    }
}

/// Acquisition setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometryPreset {
    SparseView { directions: usize },
    LimitedAngle { start: f64, end: f64 },
}

impl GeometryPreset {
    /// `sparse:<dirs>` or `limited:<start>:<end>` (degrees).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("geometry must be `sparse:<dirs>` or `limited:<start>:<end>`, got {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let preset = match parts.as_slice() {
            ["sparse", d] => GeometryPreset::SparseView {
                directions: d.parse().map_err(|_| bad())?,
            },
            ["limited", a, b] => GeometryPreset::LimitedAngle {
                start: a.parse().map_err(|_| bad())?,
                end: b.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        // Any image size exercises the angular checks.
        preset.geometry(32)?;
        Ok(preset)
    }

    pub fn to_text(&self) -> String {
        match self {
            GeometryPreset::SparseView { directions } => format!("sparse:{directions}"),
            GeometryPreset::LimitedAngle { start, end } => format!("limited:{start}:{end}"),
        }
    }

    pub fn geometry(&self, size: usize) -> Result<Geometry> {
        match *self {
            GeometryPreset::SparseView { directions } => Geometry::sparse_view(size, directions),
            GeometryPreset::LimitedAngle { start, end } => Geometry::limited_angle(size, start, end),
        }
    }

    /// Cascade depth used with full-scale training.
    pub fn full_depth(&self) -> usize {
        match *self {
            GeometryPreset::SparseView { directions } if directions <= 16 => 20,
            GeometryPreset::SparseView { .. } => 10,
            GeometryPreset::LimitedAngle { start, end } if end - start >= 150.0 => 20,
            GeometryPreset::LimitedAngle { .. } => 30,
        }
    }

    /// Multiplier from full-scale to desk-scale depth.
    pub fn desk_depth_factor(&self) -> f64 {
        match self {
            GeometryPreset::SparseView { .. } => 0.5,
            GeometryPreset::LimitedAngle { .. } => 8.0 / 30.0,
        }
    }
}

/// Reconstruction methods compared in the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Fbp,
    Tv,
    Dgd,
    Bdgd,
    BdgdPlus,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fbp, Method::Tv, Method::Dgd, Method::Bdgd, Method::BdgdPlus];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Tv => "tv",
            Method::Dgd => "dgd",
            Method::Bdgd => "bdgd",
            Method::BdgdPlus => "bdgd+",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fbp" => Ok(Method::Fbp),
            "tv" => Ok(Method::Tv),
            other => Mode::parse(other).map(Method::from).map_err(|_| {
                Error::Config(format!("unknown method {s:?}; expected one of fbp, tv, dgd, bdgd, bdgd+"))
            }),
        }
    }

    /// The cascade mode of a learned method.
    pub fn mode(self) -> Option<Mode> {
        match self {
            Method::Dgd => Some(Mode::Dgd),
            Method::Bdgd => Some(Mode::Bdgd),
            Method::BdgdPlus => Some(Mode::BdgdPlus),
            _ => None,
        }
    }

    /// Directory-safe name.
    pub fn dir_name(self) -> &'static str {
        match self {
            Method::BdgdPlus => "bdgd_plus",
            m => m.name(),
        }
    }
}

impl From<Mode> for Method {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Dgd => Method::Dgd,
            Mode::Bdgd => Method::Bdgd,
            Mode::BdgdPlus => Method::BdgdPlus,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub geometry: GeometryPreset,
    pub image_size: usize,
    pub train_count: usize,
    pub validation_count: usize,
    pub test_count: usize,
    /// Noise std relative to the mean absolute sinogram value.
    pub noise_level: f64,
    /// Cascade depth; `None` derives it from the geometry and scale.
    pub blocks: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Channel width of the block feature extractors.
    pub width: usize,
    /// Seed for training and Monte-Carlo inference.
    pub seed: u64,
    /// Seed for phantoms and measurement noise.
    pub data_seed: u64,
    /// Monte-Carlo samples for predictive inference.
    pub samples: usize,
    pub tv_lambdas: Vec<f64>,
    pub tv_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            scale: Scale::Desk,
            geometry: GeometryPreset::SparseView { directions: 32 },
            image_size: 64,
            train_count: 500,
            validation_count: 5,
            test_count: 50,
            noise_level: 0.01,
            blocks: None,
            epochs: 30,
            // Per-sample updates: at a fixed 30-epoch budget the step count,
            // not the gradient noise, limits how far each block gets.
            batch_size: 1,
            learning_rate: 1e-3,
            width: 16,
            seed: 0,
            data_seed: 0,
            samples: 100,
            tv_lambdas: crate::baselines::log_grid(-4, 0, 2),
            tv_iterations: 500,
        }
    }

    pub fn full() -> Self {
        ExperimentConfig {
            scale: Scale::Full,
            image_size: 128,
            train_count: 4000,
            test_count: 100,
            epochs: 150,
            batch_size: 16,
            width: 32,
            ..Self::desk()
        }
    }

    /// Resolved cascade depth.
    pub fn depth(&self) -> usize {
        self.blocks.unwrap_or_else(|| {
            let full = self.geometry.full_depth();
            match self.scale {
                Scale::Full => full,
                Scale::Desk => ((full as f64 * self.geometry.desk_depth_factor()).round() as usize).max(1),
            }
        })
    }

    pub fn geometry(&self) -> Result<Geometry> {
        self.geometry.geometry(self.image_size)
    }

    pub fn arch(&self) -> Arch {
        Arch::with_width(self.width)
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            arch: self.arch(),
            blocks: self.depth(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for `{key}`")))
        }
        match key {
            "scale" => {
                let scale = Scale::parse(value)?;
                let base = match scale {
                    Scale::Desk => Self::desk(),
                    Scale::Full => Self::full(),
                };
                *self = ExperimentConfig {
                    geometry: self.geometry,
                    seed: self.seed,
                    data_seed: self.data_seed,
                    ..base
                };
            }
            "geometry" => self.geometry = GeometryPreset::parse(value)?,
            "image_size" => self.image_size = num(key, value)?,
            "train_count" => self.train_count = num(key, value)?,
            "validation_count" => self.validation_count = num(key, value)?,
            "test_count" => self.test_count = num(key, value)?,
            "noise_level" => self.noise_level = num(key, value)?,
            "blocks" => self.blocks = Some(num(key, value)?),
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "tv_lambdas" => {
                self.tv_lambdas = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "tv_iterations" => self.tv_iterations = num(key, value)?,
            // Derived values written by `to_text`; informational only.
            "depth_factor" => {}
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parse line-oriented `key=value` text on top of the desk preset.
    /// `scale` is applied first so that later keys override its defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::desk();
        entries.sort_by_key(|(k, _)| k != "scale");
        for (k, v) in entries {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "configuration file".into(),
                path: path.to_path_buf(),
            },
            _ => e.into(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        let positive = [
            ("train_count", self.train_count),
            ("validation_count", self.validation_count),
            ("test_count", self.test_count),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("width", self.width),
            ("samples", self.samples),
            ("tv_iterations", self.tv_iterations),
            ("blocks", self.depth()),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be at least 1")));
        }
        if self.batch_size > self.train_count {
            return Err(Error::Config("`batch_size` exceeds `train_count`".into()));
        }
        if !(self.noise_level >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("`noise_level` must be >= 0 and `learning_rate` > 0".into()));
        }
        if self.tv_lambdas.is_empty() || self.tv_lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("`tv_lambdas` must be a nonempty list of positive weights".into()));
        }
        Ok(())
    }

    /// Resolved configuration as `key=value` lines.
    pub fn to_text(&self) -> String {
        let lambdas: Vec<String> = self.tv_lambdas.iter().map(|l| format!("{l:e}")).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("writing to a String");
        kv("scale", self.scale.name().into());
        kv("geometry", self.geometry.to_text());
        kv("image_size", self.image_size.to_string());
        kv("train_count", self.train_count.to_string());
        kv("validation_count", self.validation_count.to_string());
        kv("test_count", self.test_count.to_string());
        kv("noise_level", self.noise_level.to_string());
        kv("blocks", self.depth().to_string());
        let factor = match self.scale {
            Scale::Desk => self.geometry.desk_depth_factor(),
            Scale::Full => 1.0,
        };
        kv("depth_factor", factor.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("width", self.width.to_string());
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("samples", self.samples.to_string());
        kv("tv_lambdas", lambdas.join(","));
        kv("tv_iterations", self.tv_iterations.to_string());
        s
    }
}

/// Dataset partitions; each draws phantoms from its own index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn first_index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1 << 24,
            Split::Test => 2 << 24,
        }
    }
}

/// Stream index of the Shepp–Logan test record.
const SHEPP_LOGAN_INDEX: u64 = 3 << 24;

/// One synthetic measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub truth: Image,
    pub clean: Sinogram,
    pub noisy: Sinogram,
    /// FBP of the noisy sinogram; the cascade's initial guess.
    pub fbp: Image,
}

impl Record {
    /// Measure `truth` and add noise from stream `(seed, index)`.
    pub fn measure(truth: Image, op: &RayTransform, noise_level: f64, seed: u64, index: u64) -> Result<Self> {
        let clean = op.forward(&truth)?;
        let noisy = add_noise_with(&clean, noise_level, &mut stream_rng(seed, index, purpose::NOISE));
        let fbp = fbp(&noisy, op.geometry())?;
        Ok(Record {
            truth,
            clean,
            noisy,
            fbp,
        })
    }

    /// Random-ellipse record number `index` of stream `seed`.
    pub fn ellipses(op: &RayTransform, noise_level: f64, seed: u64, index: u64) -> Result<Self> {
        let size = op.geometry().image_size;
        let truth = random_ellipse_phantom_with(&mut stream_rng(seed, index, purpose::PHANTOM), size)?;
        Self::measure(truth, op, noise_level, seed, index)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert("truth", self.truth.to_tensor());
        c.insert("clean", self.clean.to_tensor());
        c.insert("noisy", self.noisy.to_tensor());
        c.insert("fbp", self.fbp.to_tensor());
        c.insert("geometry", self.clean.geometry().to_tensor());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let g = Geometry::from_tensor(c.require("geometry")?)?;
        let sino = |name: &str| Sinogram::from_vec(&g, c.require(name)?.data().to_vec());
        Ok(Record {
            truth: Image::from_tensor(c.require("truth")?)?,
            clean: sino("clean")?,
            noisy: sino("noisy")?,
            fbp: Image::from_tensor(c.require("fbp")?)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Header and record list of a generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub first_index: u64,
    pub count: usize,
    pub geometry: Geometry,
    pub noise_level: f64,
    /// Record paths relative to `root`.
    pub records: Vec<PathBuf>,
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("first_index", self.first_index.to_string()),
            ("count", self.count.to_string()),
            ("image_size", g.image_size.to_string()),
            ("num_angles", g.num_angles.to_string()),
            ("angle_start", format!("{:e}", g.angle_start)),
            ("angle_end", format!("{:e}", g.angle_end)),
            ("num_detectors", g.num_detectors.to_string()),
            ("detector_spacing", format!("{:e}", g.detector_spacing)),
            ("noise_level", format!("{:e}", self.noise_level)),
        ] {
            writeln!(s, "{k}={v}").expect("writing to a String");
        }
        for r in &self.records {
            writeln!(s, "record={}", r.display()).expect("writing to a String");
        }
        s
    }

    pub fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.path(), self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "dataset manifest (run `generate-data` first)".into(),
                path: path.to_path_buf(),
            },
            _ => e.into(),
        })?;
        let mut header = std::collections::HashMap::new();
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("{}: bad manifest line {line:?}", path.display())))?;
            if k == "record" {
                records.push(PathBuf::from(v));
            } else {
                header.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::Format(format!("{}: manifest lacks `{k}`", path.display())))
        };
        fn p<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("bad manifest value {v:?}")))
        }
        let geometry = Geometry::new(
            p(get("image_size")?)?,
            p(get("num_angles")?)?,
            p(get("angle_start")?)?,
            p(get("angle_end")?)?,
            p(get("num_detectors")?)?,
            p(get("detector_spacing")?)?,
        )?;
        let m = DatasetManifest {
            seed: p(get("seed")?)?,
            first_index: p(get("first_index")?)?,
            count: p(get("count")?)?,
            geometry,
            noise_level: p(get("noise_level")?)?,
            records,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        if m.records.len() != m.count {
            return Err(Error::Format(format!(
                "{}: header says {} records, found {}",
                path.display(),
                m.count,
                m.records.len()
            )));
        }
        Ok(m)
    }

    pub fn load_records(&self) -> Result<Vec<Record>> {
        self.records.iter().map(|r| Record::load(self.root.join(r))).collect()
    }

    /// Regenerate every record from the header.
    pub fn regenerate(&self) -> Result<Vec<Record>> {
        let op = RayTransform::new(&self.geometry)?;
        (0..self.count as u64)
            .map(|i| Record::ellipses(&op, self.noise_level, self.seed, self.first_index + i))
            .collect()
    }
}

/// Generate `count` random-ellipse records into `dir` and write the manifest.
pub fn generate_dataset(
    dir: impl AsRef<Path>,
    seed: u64,
    first_index: u64,
    count: usize,
    geometry: &Geometry,
    noise_level: f64,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Contract("a dataset needs at least one record".into()));
    }
    let root = dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&root)?;
    let op = RayTransform::new(geometry)?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let rec = Record::ellipses(&op, noise_level, seed, first_index + i as u64)?;
        let name = PathBuf::from(format!("record_{i:05}.bdgd"));
        rec.save(root.join(&name))?;
        records.push(name);
    }
    let m = DatasetManifest {
        seed,
        first_index,
        count,
        geometry: geometry.clone(),
        noise_level,
        records,
        root,
    };
    m.write()?;
    Ok(m)
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        RunLayout {
            data: root.join("data"),
            root,
        }
    }

    /// Share the dataset of another run.
    pub fn with_data(mut self, data: impl Into<PathBuf>) -> Self {
        self.data = data.into();
        self
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.data.join(split.name())
    }

    pub fn manifest(&self, split: Split) -> PathBuf {
        self.split(split).join(MANIFEST_FILE)
    }

    pub fn shepp_logan(&self) -> PathBuf {
        self.data.join("shepp_logan.bdgd")
    }

    pub fn model_dir(&self, method: Method) -> PathBuf {
        self.root.join("models").join(method.dir_name())
    }

    pub fn checkpoint(&self, method: Method) -> PathBuf {
        crate::training::checkpoint_path(&self.model_dir(method))
    }

    pub fn recon_dir(&self, method: Method) -> PathBuf {
        self.root.join("recon").join(method.dir_name())
    }

    pub fn decompose_dir(&self, method: Method, name: &str) -> PathBuf {
        self.root.join("decompose").join(method.dir_name()).join(name)
    }

    pub fn results_text(&self) -> PathBuf {
        self.root.join("results.txt")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }
}

/// Write the resolved configuration next to the run outputs.
pub fn write_config(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<()> {
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.config(), cfg.to_text())?;
    Ok(())
}

/// Generate train, validation and test splits plus the Shepp–Logan record.
pub fn generate_data(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<()> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    for (split, count) in [
        (Split::Train, cfg.train_count),
        (Split::Validation, cfg.validation_count),
        (Split::Test, cfg.test_count),
    ] {
        generate_dataset(layout.split(split), cfg.data_seed, split.first_index(), count, &g, cfg.noise_level)?;
    }
    let op = RayTransform::new(&g)?;
    Record::measure(shepp_logan(cfg.image_size)?, &op, cfg.noise_level, cfg.data_seed, SHEPP_LOGAN_INDEX)?
        .save(layout.shepp_logan())?;
    Ok(())
}

/// Load a split, checking it matches the configured geometry.
pub fn load_split(cfg: &ExperimentConfig, layout: &RunLayout, split: Split) -> Result<Vec<Record>> {
    let m = DatasetManifest::read(layout.manifest(split))?;
    if m.geometry != cfg.geometry()? {
        return Err(Error::Config(format!(
            "{} was generated for a different geometry than the configuration",
            m.path().display()
        )));
    }
    m.load_records()
}

pub fn load_shepp_logan(layout: &RunLayout) -> Result<Record> {
    let path = layout.shepp_logan();
    if !path.exists() {
        return Err(Error::Missing {
            what: "Shepp–Logan record (run `generate-data` first)".into(),
            path,
        });
    }
    Record::load(path)
}

/// Train a learned method on the training split. Epoch lines are appended
/// to `models/<method>/train.log`; an existing checkpoint is resumed.
pub fn train_method(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    method: Method,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    let mode = method
        .mode()
        .ok_or_else(|| Error::Config(format!("`{}` is not a trainable method", method.name())))?;
    let records = load_split(cfg, layout, Split::Train)?;
    let op = RayTransform::new(&cfg.geometry()?)?;
    let mut data = BlockDataset::new(
        records.iter().map(|r| r.truth.clone()).collect(),
        records.iter().map(|r| r.fbp.clone()).collect(),
        records.into_iter().map(|r| r.noisy).collect(),
    )?;
    let dir = layout.model_dir(method);
    std::fs::create_dir_all(&dir)?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("train.log"))?;
    let mut io_err = None;
    let report = train_cascade(&op, &mut data, &cfg.train_config(mode), Some(&dir), |s| {
        if let Err(e) = writeln!(log, "{}", s.log_line()) {
            io_err.get_or_insert(e);
        }
        on_epoch(s);
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok(report)
}

pub fn load_model(cfg: &ExperimentConfig, layout: &RunLayout, method: Method) -> Result<Cascade> {
    let path = layout.checkpoint(method);
    if !path.exists() {
        return Err(Error::Missing {
            what: format!("`{}` checkpoint (run `train --method {}` first)", method.name(), method.name()),
            path,
        });
    }
    let c = Cascade::load(&path)?;
    if c.len() != cfg.depth() {
        return Err(Error::Config(format!(
            "{} holds {} of {} blocks; rerun `train` to finish it",
            path.display(),
            c.len(),
            cfg.depth()
        )));
    }
    Ok(c)
}

fn recon_name(index: usize) -> String {
    format!("test_{index:05}.bdgd")
}

const SHEPP_LOGAN_RECON: &str = "shepp_logan.bdgd";

/// Pick the TV weight on the validation split.
pub fn select_tv_lambda(cfg: &ExperimentConfig, layout: &RunLayout, op: &RayTransform) -> Result<(f64, Vec<(f64, f64)>)> {
    let val: Vec<(Sinogram, Image)> = load_split(cfg, layout, Split::Validation)?
        .into_iter()
        .map(|r| (r.noisy, r.truth))
        .collect();
    let base = TVConfig {
        max_iterations: cfg.tv_iterations,
        ..TVConfig::new(1.0)
    };
    let sweep = lambda_sweep(op, &val, &cfg.tv_lambdas, &base)?;
    Ok((best_of_sweep(&sweep), sweep))
}

/// Reconstruct the test split and the Shepp–Logan record with `method`,
/// storing every image under `recon/<method>/`.
pub fn reconstruct_method(cfg: &ExperimentConfig, layout: &RunLayout, method: Method) -> Result<()> {
    let mut records = load_split(cfg, layout, Split::Test)?;
    records.push(load_shepp_logan(layout)?);
    let op = RayTransform::new(&cfg.geometry()?)?;
    let images: Vec<Image> = match method {
        Method::Fbp => records.iter().map(|r| r.fbp.clone()).collect(),
        Method::Tv => {
            let (lambda, sweep) = select_tv_lambda(cfg, layout, &op)?;
            let dir = layout.recon_dir(method);
            std::fs::create_dir_all(&dir)?;
            let mut s = format!("selected={lambda:e}\n");
            for (l, p) in &sweep {
                writeln!(s, "lambda={l:e} validation_psnr={p:.6}").expect("writing to a String");
            }
            std::fs::write(dir.join("lambda.txt"), s)?;
            let solver = TvSolver::new(
                &op,
                TVConfig {
                    max_iterations: cfg.tv_iterations,
                    ..TVConfig::new(lambda)
                },
            )?;
            records
                .iter()
                .map(|r| Ok(solver.solve(&r.noisy, &r.fbp)?.image))
                .collect::<Result<_>>()?
        }
        learned => {
            let cascade = load_model(cfg, layout, learned)?;
            let ys: Vec<&Sinogram> = records.iter().map(|r| &r.noisy).collect();
            let x0s: Vec<Image> = records.iter().map(|r| r.fbp.clone()).collect();
            mc_predict_batch(&cascade, &op, &ys, &x0s, cfg.samples, cfg.seed, false)?
                .into_iter()
                .map(|p| p.mean)
                .collect()
        }
    };
    let dir = layout.recon_dir(method);
    std::fs::create_dir_all(&dir)?;
    let (sl, test) = images.split_last().expect("at least the Shepp–Logan record");
    for (i, img) in test.iter().enumerate() {
        save_image(img, dir.join(recon_name(i)))?;
    }
    save_image(sl, dir.join(SHEPP_LOGAN_RECON))
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    /// Mean PSNR over the test ellipses.
    pub ellipses: f64,
    pub shepp_logan: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub setting: String,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn row(&self, method: Method) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>16} {:>16}\n", "method", "ellipses_psnr", "shepp_logan_psnr");
        writeln!(s, "{:<8} {:>16} {:>16}", "", self.setting, self.setting).expect("writing to a String");
        for r in &self.rows {
            writeln!(s, "{:<8} {:>16.6} {:>16.6}", r.method.name(), r.ellipses, r.shepp_logan).expect("writing to a String");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,setting,ellipses_psnr,shepp_logan_psnr\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.6},{:.6}", r.method.name(), self.setting, r.ellipses, r.shepp_logan)
                .expect("writing to a String");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut setting = String::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let [m, st, e, sl] = f.as_slice() else {
                return Err(Error::Format(format!("bad results row {line:?}")));
            };
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("bad number {v:?}")));
            setting = st.to_string();
            rows.push(ResultRow {
                method: Method::parse(m)?,
                ellipses: num(e)?,
                shepp_logan: num(sl)?,
            });
        }
        Ok(ResultsTable { setting, rows })
    }
}

/// Label of an acquisition setting, e.g. `32dirs` or `0-90deg`.
pub fn setting_label(preset: &GeometryPreset) -> String {
    match preset {
        GeometryPreset::SparseView { directions } => format!("{directions}dirs"),
        GeometryPreset::LimitedAngle { start, end } => format!("{start}-{end}deg"),
    }
}

/// PSNR row of a method from its stored reconstructions.
pub fn evaluate_method(cfg: &ExperimentConfig, layout: &RunLayout, method: Method) -> Result<ResultRow> {
    let truths = load_split(cfg, layout, Split::Test)?;
    let dir = layout.recon_dir(method);
    let load = |name: String| {
        let path = dir.join(&name);
        if !path.exists() {
            return Err(Error::Missing {
                what: format!("`{}` reconstruction (run `reconstruct --method {}` first)", method.name(), method.name()),
                path,
            });
        }
        load_image(path)
    };
    let mut total = 0.0;
    for (i, r) in truths.iter().enumerate() {
        total += psnr(&load(recon_name(i))?, &r.truth, 1.0)?;
    }
    let sl = load_shepp_logan(layout)?;
    Ok(ResultRow {
        method,
        ellipses: total / truths.len() as f64,
        shepp_logan: psnr(&load(SHEPP_LOGAN_RECON.into())?, &sl.truth, 1.0)?,
    })
}

/// Evaluate `methods` and write `results.txt` and `results.csv`.
pub fn evaluate(cfg: &ExperimentConfig, layout: &RunLayout, methods: &[Method]) -> Result<ResultsTable> {
    let rows = methods
        .iter()
        .map(|&m| evaluate_method(cfg, layout, m))
        .collect::<Result<Vec<_>>>()?;
    let table = ResultsTable {
        setting: setting_label(&cfg.geometry),
        rows,
    };
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.results_text(), table.to_text())?;
    std::fs::write(layout.results_csv(), table.to_csv())?;
    Ok(table)
}

/// Generate data, train the learned methods, reconstruct with all five
/// methods and evaluate.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    mut on_epoch: impl FnMut(Method, &EpochStats),
) -> Result<ResultsTable> {
    write_config(cfg, layout)?;
    if !layout.manifest(Split::Test).exists() {
        generate_data(cfg, layout)?;
    }
    for m in [Method::Dgd, Method::Bdgd, Method::BdgdPlus] {
        train_method(cfg, layout, m, |s| on_epoch(m, s))?;
    }
    for m in Method::ALL {
        reconstruct_method(cfg, layout, m)?;
    }
    evaluate(cfg, layout, &Method::ALL)
}

/// Input of an uncertainty decomposition.
#[derive(Debug, Clone, PartialEq)]
pub enum DecomposeTarget {
    /// Test record by index.
    Test(usize),
    SheppLogan,
    /// Shepp–Logan with `text` rasterized on top; out of distribution.
    Text(String),
}

/// Predictive maps for one input together with its glyph mask (text targets).
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub record: Record,
    pub result: PredictiveResult,
    pub mask: Option<Vec<bool>>,
}

/// Intensity of overlaid text.
pub const TEXT_INTENSITY: f64 = 1.0;

pub fn decompose(cfg: &ExperimentConfig, layout: &RunLayout, method: Method, target: &DecomposeTarget) -> Result<Decomposition> {
    let cascade = load_model(cfg, layout, method)?;
    let op = RayTransform::new(&cfg.geometry()?)?;
    let (record, mask) = match target {
        DecomposeTarget::Test(i) => {
            let records = load_split(cfg, layout, Split::Test)?;
            let n = records.len();
            let r = records
                .into_iter()
                .nth(*i)
                .ok_or_else(|| Error::Config(format!("test sample {i} out of range (0..{n})")))?;
            (r, None)
        }
        DecomposeTarget::SheppLogan => (load_shepp_logan(layout)?, None),
        DecomposeTarget::Text(text) => {
            let (img, mask) = overlay_text(&shepp_logan(cfg.image_size)?, text, TEXT_INTENSITY)?;
            (Record::measure(img, &op, cfg.noise_level, cfg.data_seed, SHEPP_LOGAN_INDEX + 1)?, Some(mask))
        }
    };
    let result = mc_predict_batch(
        &cascade,
        &op,
        &[&record.noisy],
        std::slice::from_ref(&record.fbp),
        cfg.samples,
        cfg.seed,
        false,
    )?
    .remove(0);
    Ok(Decomposition { record, result, mask })
}

/// Mean of `values` where `mask` is `inside`.
pub fn masked_mean(values: &Image, mask: &[bool], inside: bool) -> f64 {
    let (sum, n) = values
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == inside)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Angular sectors of a limited-angle scan, as `(missing, in_view)` masks.
///
/// A boundary whose normal points along polar angle `phi` is resolved only by
/// the view at `phi` (rays tangent to it), so pixels whose polar angle falls in
/// the absent range sit where missing-wedge artifacts concentrate. Each mask
/// keeps the central half of its angular range, inside the unit disc and away
/// from the centre pixel, so the two never touch.
pub fn wedge_bands(size: usize, start_deg: f64, end_deg: f64) -> (Vec<bool>, Vec<bool>) {
    let within = |phi: f64, lo: f64, hi: f64| {
        let quarter = (hi - lo) / 4.0;
        let rel = (phi - lo - quarter).rem_euclid(180.0);
        rel <= hi - lo - 2.0 * quarter
    };
    let h = 2.0 / size as f64;
    let mut missing = vec![false; size * size];
    let mut in_view = vec![false; size * size];
    for row in 0..size {
        for col in 0..size {
            let (x, y) = Image::pixel_center(size, row, col);
            let r = x.hypot(y);
            if r > 1.0 || r < 2.0 * h {
                continue;
            }
            let phi = y.atan2(x).to_degrees().rem_euclid(180.0);
            let i = row * size + col;
            in_view[i] = within(phi, start_deg, end_deg);
            missing[i] = within(phi, end_deg, start_deg + 180.0);
        }
    }
    (missing, in_view)
}

/// Store a mask as a 0/1 image container.
pub fn save_mask(mask: &[bool], size: usize, path: impl AsRef<Path>) -> Result<()> {
    let t = Tensor::new(&[size, size], mask.iter().map(|&m| f64::from(u8::from(m))).collect())?;
    let mut c = Container::new();
    c.insert("image", t);
    c.write(path)
}
