//! Experiment harness: flat key=value configs, dataset resolution, run
//! orchestration, reports and reconstruction grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, write_atomic};
use crate::data::{
    load_idx, load_usps, make_synthetic_shift, preprocess, Dataset, Normalize, Shift, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::DrcnModel;
use crate::train::{build_model, evaluate, select_unsupervised_pool, split_source, Flavor, Phase, StopReason, TrainConfig, Trainer};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "DRCN_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Drcn,
    DrcnS,
    DrcnSt,
    ConvnetSrc,
    ConvnetTgt,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::Drcn,
        Baseline::DrcnS,
        Baseline::DrcnSt,
        Baseline::ConvnetSrc,
        Baseline::ConvnetTgt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Baseline::Drcn => "drcn",
            Baseline::DrcnS => "drcn_s",
            Baseline::DrcnSt => "drcn_st",
            Baseline::ConvnetSrc => "convnet_src",
            Baseline::ConvnetTgt => "convnet_tgt",
        }
    }

    pub fn has_decoder(&self) -> bool {
        matches!(self, Baseline::Drcn | Baseline::DrcnS | Baseline::DrcnSt)
    }

    pub fn flavor(&self) -> Flavor {
        match self {
            Baseline::DrcnS => Flavor::SourceOnly,
            Baseline::DrcnSt => Flavor::SourceTarget,
            _ => Flavor::TargetOnly,
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}` (expected drcn, drcn_s, drcn_st, convnet_src or convnet_tgt)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Dataset name (`mnist`, `usps`, `synth`, `synth-<shift>`) or path.
    pub source: String,
    pub target: String,
    pub baseline: Baseline,
    pub out: PathBuf,
    /// Dump a reconstruction grid every this many epochs; 0 dumps only the
    /// final one.
    pub dump_every: usize,
    pub grid_images: usize,
    /// Dataset root; falls back to `DRCN_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    pub input_size: usize,
    pub source_limit: Option<usize>,
    /// Unlabeled target images fed to reconstruction.
    pub target_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_n: usize,
    pub synthetic_test_n: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: "mnist".into(),
            target: "usps".into(),
            baseline: Baseline::Drcn,
            out: PathBuf::from("runs/default"),
            dump_every: 0,
            grid_images: 8,
            data_dir: None,
            input_size: 28,
            source_limit: None,
            target_limit: None,
            test_limit: None,
            synthetic_classes: 10,
            synthetic_n: 2000,
            synthetic_test_n: 500,
            data_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: expected {expected}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected boolean, got `{value}`"))),
    }
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "all" {
        Ok(None)
    } else {
        parse_value(key, value, "unsigned integer or `all`").map(Some)
    }
}

impl ExperimentConfig {
    /// Sets one key. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let n = &mut t.noise;
        const REAL: &str = "real number";
        const UINT: &str = "unsigned integer";
        match key {
            "source" => self.source = value.to_string(),
            "target" => self.target = value.to_string(),
            "baseline" | "flavor" => {
                self.baseline = value
                    .parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: expected one of drcn, drcn_s, drcn_st, convnet_src, convnet_tgt, got `{value}`")))?
            }
            "out" => self.out = PathBuf::from(value),
            "dump_every" => self.dump_every = parse_value(key, value, UINT)?,
            "grid_images" => self.grid_images = parse_value(key, value, UINT)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "input_size" => self.input_size = parse_value(key, value, UINT)?,
            "source_limit" => self.source_limit = parse_limit(key, value)?,
            "target_limit" => self.target_limit = parse_limit(key, value)?,
            "test_limit" => self.test_limit = parse_limit(key, value)?,
            "synthetic_classes" => self.synthetic_classes = parse_value(key, value, UINT)?,
            "synthetic_n" => self.synthetic_n = parse_value(key, value, UINT)?,
            "synthetic_test_n" => self.synthetic_test_n = parse_value(key, value, UINT)?,
            "data_seed" => self.data_seed = parse_value(key, value, UINT)?,
            "lambda" => t.lambda = parse_value(key, value, REAL)?,
            "lr_c" => t.lr_c = parse_value(key, value, REAL)?,
            "lr_r" => t.lr_r = parse_value(key, value, REAL)?,
            "decay" => t.decay = parse_value(key, value, REAL)?,
            "batch_source" => t.batch_source = parse_value(key, value, UINT)?,
            "batch_target" => t.batch_target = parse_value(key, value, UINT)?,
            "channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                let err = || Error::Config(format!("key `{key}`: expected three comma-separated unsigned integers, got `{value}`"));
                if parts.len() != 3 {
                    return Err(err());
                }
                for (slot, p) in t.channels.iter_mut().zip(parts) {
                    *slot = p.parse().map_err(|_| err())?;
                }
            }
            "fc_width" => t.fc_width = parse_value(key, value, UINT)?,
            "p_keep" => t.p_keep = parse_value(key, value, REAL)?,
            "augment" => t.augment = parse_bool(key, value)?,
            "denoise" => t.denoise = parse_bool(key, value)?,
            "stop_window" => t.stop_window = parse_value(key, value, UINT)?,
            "stop_tolerance" => t.stop_tolerance = parse_value(key, value, REAL)?,
            "max_epochs" => t.max_epochs = parse_value(key, value, UINT)?,
            "seed" => t.seed = parse_value(key, value, UINT)?,
            "val_fraction" => t.val_fraction = parse_value(key, value, REAL)?,
            "noise.translate_px" => n.translate_px = parse_value(key, value, UINT)?,
            "noise.rotate_deg" => n.rotate_deg = parse_value(key, value, REAL)?,
            "noise.skew" => n.skew = parse_value(key, value, REAL)?,
            "noise.scale" => n.scale = parse_value(key, value, REAL)?,
            "noise.zero_mask_fraction" => n.zero_mask_fraction = parse_value(key, value, REAL)?,
            "noise.gaussian_std" => n.gaussian_std = parse_value(key, value, REAL)?,
            "noise.translate" => n.enable_translate = parse_bool(key, value)?,
            "noise.rotate" => n.enable_rotate = parse_bool(key, value)?,
            "noise.skew_enabled" => n.enable_skew = parse_bool(key, value)?,
            "noise.scale_enabled" => n.enable_scale = parse_bool(key, value)?,
            "noise.zero_mask" => n.enable_zero_mask = parse_bool(key, value)?,
            "noise.gaussian" => n.enable_gaussian = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        t.flavor = self.baseline.flavor();
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any), then applies `overrides` in order, then
    /// validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = path {
            cfg.apply_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.source == self.target && self.baseline != Baseline::ConvnetTgt {
            return Err(Error::Config(format!(
                "source and target are both `{}`; only convnet_tgt trains and tests on one domain",
                self.source
            )));
        }
        if self.input_size < 4 {
            return Err(Error::Config(format!("input_size {} is too small", self.input_size)));
        }
        if self.grid_images == 0 {
            return Err(Error::Config("grid_images must be positive".into()));
        }
        Ok(())
    }

    /// Canonical snapshot listing every key; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let n = &t.noise;
        let lim = |v: Option<usize>| v.map_or("all".to_string(), |x| x.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("source", self.source.clone());
        kv("target", self.target.clone());
        kv("baseline", self.baseline.as_str().into());
        kv("out", self.out.display().to_string());
        kv("dump_every", self.dump_every.to_string());
        kv("grid_images", self.grid_images.to_string());
        kv("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("input_size", self.input_size.to_string());
        kv("source_limit", lim(self.source_limit));
        kv("target_limit", lim(self.target_limit));
        kv("test_limit", lim(self.test_limit));
        kv("synthetic_classes", self.synthetic_classes.to_string());
        kv("synthetic_n", self.synthetic_n.to_string());
        kv("synthetic_test_n", self.synthetic_test_n.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("lambda", format!("{:?}", t.lambda));
        kv("lr_c", format!("{:?}", t.lr_c));
        kv("lr_r", format!("{:?}", t.lr_r));
        kv("decay", format!("{:?}", t.decay));
        kv("batch_source", t.batch_source.to_string());
        kv("batch_target", t.batch_target.to_string());
        kv("channels", format!("{},{},{}", t.channels[0], t.channels[1], t.channels[2]));
        kv("fc_width", t.fc_width.to_string());
        kv("p_keep", format!("{:?}", t.p_keep));
        kv("augment", t.augment.to_string());
        kv("denoise", t.denoise.to_string());
        kv("stop_window", t.stop_window.to_string());
        kv("stop_tolerance", format!("{:?}", t.stop_tolerance));
        kv("max_epochs", t.max_epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("val_fraction", format!("{:?}", t.val_fraction));
        kv("noise.translate_px", n.translate_px.to_string());
        kv("noise.rotate_deg", format!("{:?}", n.rotate_deg));
        kv("noise.skew", format!("{:?}", n.skew));
        kv("noise.scale", format!("{:?}", n.scale));
        kv("noise.zero_mask_fraction", format!("{:?}", n.zero_mask_fraction));
        kv("noise.gaussian_std", format!("{:?}", n.gaussian_std));
        kv("noise.translate", n.enable_translate.to_string());
        kv("noise.rotate", n.enable_rotate.to_string());
        kv("noise.skew_enabled", n.enable_skew.to_string());
        kv("noise.scale_enabled", n.enable_scale.to_string());
        kv("noise.zero_mask", n.enable_zero_mask.to_string());
        kv("noise.gaussian", n.enable_gaussian.to_string());
        s
    }

    /// SHA-256 of the canonical snapshot, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    fn data_root(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

const MNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];
const USPS_FILES: [&str; 2] = ["usps_train.bin", "usps_test.bin"];

fn split_index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

fn resolve_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab) = MNIST_FILES[split_index(split)];
    if dir.join(img).is_file() {
        return load_idx(&dir.join(img), Some(&dir.join(lab)), 10);
    }
    let usps = dir.join(USPS_FILES[split_index(split)]);
    if usps.is_file() {
        return load_usps(&usps, 10);
    }
    Err(Error::Config(format!(
        "no {} split found in {} (expected {img} or {})",
        split.as_str(),
        dir.display(),
        USPS_FILES[split_index(split)]
    )))
}

/// Loads a dataset from a directory (its test split), an IDX image file or
/// a USPS container, sniffing the format from the magic bytes. IDX labels
/// come from `labels` or from the sibling `*-labels-idx1-ubyte` file when
/// it exists.
pub fn load_path(path: &Path, labels: Option<&Path>) -> Result<Dataset> {
    if path.is_dir() {
        return resolve_dir(path, Split::Test);
    }
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    }
    if &head == crate::data::USPS_MAGIC {
        return load_usps(path, 10);
    }
    if u32::from_be_bytes(head) == crate::data::IDX_IMAGES_MAGIC {
        let sibling = path
            .file_name()
            .and_then(|n| n.to_str())
            .filter(|n| n.contains("images-idx3"))
            .map(|n| path.with_file_name(n.replace("images-idx3", "labels-idx1")))
            .filter(|p| p.is_file());
        return load_idx(path, labels.or(sibling.as_deref()), 10);
    }
    Err(Error::Format(format!(
        "{}: unrecognised image container (magic {head:?})",
        path.display()
    )))
}

impl ExperimentConfig {
    /// Loads one split of a named or path-given domain, preprocessed to the
    /// model input size.
    pub fn load_domain(&self, name: &str, split: Split) -> Result<Dataset> {
        let ds = if name == "synth" || name.starts_with("synth-") {
            let shift: Shift = match name.strip_prefix("synth-") {
                Some(s) => s.parse()?,
                None => Shift::Identity,
            };
            let n = match split {
                Split::Train => self.synthetic_n,
                Split::Test => self.synthetic_test_n,
            };
            let spec = SyntheticSpec {
                size: self.input_size,
                ..SyntheticSpec::new(self.synthetic_classes, shift)
            };
            let mut rng = Rng::substream(self.data_seed, &format!("synthetic.{}", split.as_str()));
            let (plain, shifted) = make_synthetic_shift(&mut rng, n, &spec)?;
            // The unshifted domain comes from the first fork and every
            // shifted domain from the second, so the two sides of a task
            // never share glyph draws.
            let mut ds = if shift == Shift::Identity { plain } else { shifted };
            ds.provenance[0] = name.to_string();
            ds
        } else {
            let path = Path::new(name);
            let dir = if path.is_dir() {
                path.to_path_buf()
            } else if matches!(name, "mnist" | "usps") {
                self.data_root()
                    .map(|r| r.join(name))
                    .ok_or_else(|| Error::Config(format!("dataset `{name}` needs data_dir or {DATA_DIR_ENV}")))?
            } else {
                return Err(Error::Config(format!("cannot resolve dataset `{name}`")));
            };
            resolve_dir(&dir, split)?
        };
        Ok(preprocess(&ds, (self.input_size, self.input_size), Normalize::UnitRange))
    }
}

/// The datasets of one experiment, limits applied.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// Labeled training data for the classification pipeline.
    pub source: Dataset,
    /// Target training split; only its images reach training.
    pub target: Dataset,
    /// Labeled target test split for evaluation.
    pub target_test: Dataset,
    /// Held-out source images for reconstruction grids.
    pub source_test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let limit = |d: Dataset, l: Option<usize>| match l {
        Some(n) => d.take(n),
        None => d,
    };
    let source_name = if cfg.baseline == Baseline::ConvnetTgt { &cfg.target } else { &cfg.source };
    let source = limit(cfg.load_domain(source_name, Split::Train)?, cfg.source_limit);
    let target = limit(cfg.load_domain(&cfg.target, Split::Train)?, cfg.target_limit);
    let target_test = limit(cfg.load_domain(&cfg.target, Split::Test)?, cfg.test_limit);
    let source_test = cfg.load_domain(source_name, Split::Test)?.take(cfg.grid_images);
    if source.image_shape() != target.image_shape() {
        return Err(Error::Config(format!(
            "source images {:?} and target images {:?} differ in shape",
            source.image_shape(),
            target.image_shape()
        )));
    }
    if source.classes != target.classes {
        return Err(Error::Config(format!(
            "source has {} classes, target has {}",
            source.classes, target.classes
        )));
    }
    Ok(ExperimentData {
        source,
        target,
        target_test,
        source_test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub baseline: Baseline,
    pub source: String,
    pub target: String,
    pub target_accuracy: Option<f64>,
    pub source_val_accuracy: Option<f64>,
    pub epochs: usize,
    pub stop_reason: String,
    pub config_hash: String,
    pub seed: u64,
    pub diagnostic: Option<String>,
}

impl RunReport {
    pub fn diverged(&self) -> bool {
        self.stop_reason == StopReason::Diverged.as_str()
    }
}

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const FINAL_GRID_FILE: &str = "recon_final.pgm";

/// Trains the configured model and writes the run directory: config
/// snapshot, training log, report, final checkpoint and reconstruction
/// grids. Divergence is reported rather than returned as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_with_data(cfg, &data)
}

/// As [`run_experiment`] with datasets already loaded.
pub fn run_with_data(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_atomic(&cfg.out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.flavor = cfg.baseline.flavor();
    if !cfg.baseline.has_decoder() {
        // A classifier alone is the λ = 1 end of the objective.
        train_cfg.lambda = 1.0;
    }
    let mut model = build_model(data.source.image_shape(), data.source.classes, &train_cfg, cfg.baseline.has_decoder())?;
    let pool = if cfg.baseline.has_decoder() {
        Some(select_unsupervised_pool(
            train_cfg.flavor,
            &data.source.unlabeled(),
            Some(&data.target.unlabeled()),
        )?)
    } else {
        None
    };

    let mut last_epoch = 0;
    let mut dump_error = None;
    let grid_source = &data.source_test.images;
    let result = {
        let out = &cfg.out;
        let every = cfg.dump_every;
        let has_decoder = cfg.baseline.has_decoder();
        Trainer::new(train_cfg.clone())
            .eval_target(&data.target_test)
            .observe(|phase, m| {
                if let Phase::SourceDone { epoch } = phase {
                    last_epoch = epoch;
                }
                if let Phase::TargetDone { epoch } = phase {
                    if has_decoder && every > 0 && epoch % every == 0 && dump_error.is_none() {
                        let path = out.join(format!("recon_epoch{epoch:03}.pgm"));
                        if let Err(e) = dump_reconstruction_grid(m, grid_source, &path) {
                            dump_error = Some(e);
                        }
                    }
                }
            })
            .run(&mut model, &data.source, pool.as_ref())
    };
    if let Some(e) = dump_error {
        return Err(e);
    }

    let mut report = RunReport {
        baseline: cfg.baseline,
        source: cfg.source.clone(),
        target: cfg.target.clone(),
        target_accuracy: None,
        source_val_accuracy: None,
        epochs: 0,
        stop_reason: String::new(),
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        diagnostic: None,
    };
    match result {
        Ok(log) => {
            write_atomic(&cfg.out.join(LOG_FILE), log.to_csv().as_bytes())?;
            checkpoint::save(&model, &cfg.out.join(CHECKPOINT_FILE))?;
            if model.has_decoder() {
                dump_reconstruction_grid(&model, grid_source, &cfg.out.join(FINAL_GRID_FILE))?;
            }
            report.epochs = log.epochs();
            report.stop_reason = log.stop.as_str().into();
            report.target_accuracy = Some(evaluate(&model, &data.target_test)?);
            let (_, val) = split_source(&data.source, &train_cfg);
            report.source_val_accuracy = if val.is_empty() { None } else { Some(evaluate(&model, &val)?) };
        }
        Err(Error::Training(msg)) => {
            report.epochs = last_epoch.saturating_sub(1);
            report.stop_reason = StopReason::Diverged.as_str().into();
            report.diagnostic = Some(msg);
        }
        Err(e) => return Err(e),
    }
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_atomic(&cfg.out.join(REPORT_FILE), json.as_bytes())?;
    Ok(report)
}

/// Files a completed run directory must contain; used as a post-run check.
pub fn check_run_dir(dir: &Path, has_decoder: bool) -> Result<()> {
    let mut missing: Vec<&str> = [CONFIG_FILE, LOG_FILE, REPORT_FILE, CHECKPOINT_FILE]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if has_decoder {
        let grids = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
            .count();
        if grids == 0 {
            missing.push("*.pgm");
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Argument(format!("run directory {} is missing {}", dir.display(), missing.join(", "))))
    }
}

/// Pixels between tiles and between the input and reconstruction blocks.
pub const GRID_GAP: usize = 2;
const GRID_COLS: usize = 8;

/// Maps a tile to bytes by its own min and max; constant tiles become 128.
fn normalize_tile(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

fn channel_mean(image: &Tensor) -> Vec<f64> {
    let s = image.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    (0..hw)
        .map(|p| (0..c).map(|ch| image.data()[ch * hw + p]).sum::<f64>() / c as f64)
        .collect()
}

/// Renders inputs (top block) above their reconstructions (bottom block)
/// as a binary PGM image.
pub fn render_reconstruction_grid(model: &DrcnModel, images: &Tensor) -> Result<Vec<u8>> {
    images.expect_rank(4, "grid images")?;
    let s = images.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let recon = model.forward_reconstruct(images)?;
    let cols = n.min(GRID_COLS);
    let rows = n.div_ceil(cols);
    let block_h = rows * h + (rows - 1) * GRID_GAP;
    let width = cols * w + (cols - 1) * GRID_GAP;
    let height = 2 * block_h + GRID_GAP;
    let mut pixels = vec![0u8; width * height];
    for (block, src) in [images, &recon].into_iter().enumerate() {
        for i in 0..n {
            let tile = normalize_tile(&channel_mean(&src.sample(i)));
            let top = block * (block_h + GRID_GAP) + (i / cols) * (h + GRID_GAP);
            let left = (i % cols) * (w + GRID_GAP);
            for r in 0..h {
                pixels[(top + r) * width + left..][..w].copy_from_slice(&tile[r * w..][..w]);
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn dump_reconstruction_grid(model: &DrcnModel, images: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &render_reconstruction_grid(model, images)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;

    #[test]
    fn empty_config_is_default() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.baseline, Baseline::Drcn);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn lambda_range_checked() {
        assert!(ExperimentConfig::parse("lambda=1.5").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "lambda=0.4\n").unwrap();
        let cfg = ExperimentConfig::resolve(Some(&path), &[("lambda".into(), "0.6".into())]).unwrap();
        assert_eq!(cfg.train.lambda, 0.6);
    }

    #[test]
    fn unknown_key_and_type_errors() {
        match ExperimentConfig::parse("lamda=0.5") {
            Err(Error::Config(m)) => assert!(m.contains("lamda")),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("max_epochs=ten") {
            Err(Error::Config(m)) => assert!(m.contains("max_epochs") && m.contains("unsigned integer"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = ExperimentConfig::parse("# header\n\nseed = 7 # trailing\nbaseline=convnet_src\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.baseline, Baseline::ConvnetSrc);
    }

    #[test]
    fn snapshot_round_trips_and_hash_is_stable() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("lambda=0.3\nchannels=8,12,16\nsource_limit=500\nnoise.rotate=false\nbaseline=drcn_st").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn same_domain_requires_target_baseline() {
        assert!(ExperimentConfig::parse("source=usps\ntarget=usps").is_err());
        assert!(ExperimentConfig::parse("source=usps\ntarget=usps\nbaseline=convnet_tgt").is_ok());
    }

    #[test]
    fn missing_dataset_is_config_error() {
        let cfg = ExperimentConfig::parse("data_dir=/nonexistent/drcn").unwrap();
        assert!(matches!(load_data(&cfg), Err(Error::Config(_))));
    }

    fn grid_model() -> DrcnModel {
        DrcnModel::build(NetworkSpec::with_channels([1, 28, 28], 2, [2, 2, 2], 300), 0.5, true, 0).unwrap()
    }

    #[test]
    fn grid_layout() {
        let pgm = render_reconstruction_grid(&grid_model(), &Tensor::full(&[1, 1, 28, 28], 0.5)).unwrap();
        let header = format!("P5\n28 {}\n255\n", 2 * 28 + GRID_GAP);
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + 28 * (2 * 28 + GRID_GAP));
        // A constant input tile maps to mid-gray.
        assert!(pgm[header.len()..][..28 * 28].iter().all(|&b| b == 128));
    }

    #[test]
    fn tile_normalization() {
        assert_eq!(normalize_tile(&[0.2, 0.2]), vec![128, 128]);
        assert_eq!(normalize_tile(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    }
}
