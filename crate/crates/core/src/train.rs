//! Alternating two-pipeline training, the stopping rule and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{Dataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::model::DrcnModel;
use crate::network::{check_fc_width, NetworkSpec};
use crate::noise::{augment_batch, corrupt_batch, NoiseConfig};
use crate::objective::{check_lambda, one_hot};
use crate::optim::{RmspropState, DEFAULT_EPSILON};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which images feed the reconstruction pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Unlabeled target images (standard).
    TargetOnly,
    /// Source images with labels stripped.
    SourceOnly,
    /// Source and target images concatenated.
    SourceTarget,
}

impl Flavor {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flavor::TargetOnly => "target",
            Flavor::SourceOnly => "source",
            Flavor::SourceTarget => "source+target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the classification loss; `1 − lambda` weighs reconstruction.
    pub lambda: f64,
    pub lr_c: f64,
    pub lr_r: f64,
    /// RMSprop moving-average decay.
    pub decay: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Filters per conv stage.
    pub channels: [usize; 3],
    pub fc_width: usize,
    pub p_keep: f64,
    pub noise: NoiseConfig,
    /// Geometric augmentation of source batches.
    pub augment: bool,
    /// Corrupt reconstruction inputs (targets stay clean).
    pub denoise: bool,
    pub stop_window: usize,
    pub stop_tolerance: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub flavor: Flavor,
    /// Fraction of the labeled source set held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            lr_c: 1e-4,
            lr_r: 1e-4,
            decay: 0.9,
            batch_source: 128,
            batch_target: 128,
            channels: [100, 150, 200],
            fc_width: 300,
            p_keep: 0.5,
            noise: NoiseConfig::default(),
            augment: true,
            denoise: true,
            stop_window: 5,
            stop_tolerance: 0.01,
            max_epochs: 100,
            seed: 0,
            flavor: Flavor::TargetOnly,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        for (name, lr) in [("lr_c", self.lr_c), ("lr_r", self.lr_r)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config(format!("decay must lie in [0, 1), got {}", self.decay)));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config(format!("channel counts must be positive, got {:?}", self.channels)));
        }
        check_fc_width(self.fc_width).map_err(|e| Error::Config(e.to_string()))?;
        crate::layers::check_p_keep(self.p_keep).map_err(|e| Error::Config(e.to_string()))?;
        self.noise.validate()?;
        if self.stop_window < 2 {
            return Err(Error::Config(format!("stop_window must be at least 2, got {}", self.stop_window)));
        }
        if !(self.stop_tolerance >= 0.0) {
            return Err(Error::Config(format!("stop_tolerance must be nonnegative, got {}", self.stop_tolerance)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    pub fn network_spec(&self, input: [usize; 3], classes: usize) -> NetworkSpec {
        NetworkSpec::with_channels(input, classes, self.channels, self.fc_width)
    }
}

/// Builds a freshly initialised model for `cfg`. Baselines pass
/// `with_decoder = false`.
pub fn build_model(input: [usize; 3], classes: usize, cfg: &TrainConfig, with_decoder: bool) -> Result<DrcnModel> {
    cfg.validate()?;
    DrcnModel::build(cfg.network_spec(input, classes), cfg.p_keep, with_decoder, cfg.seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_r: Option<f64>,
    pub src_val_acc: Option<f64>,
    pub tgt_acc: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// The record with wall-clock time zeroed, for reproducibility checks.
    pub fn without_time(&self) -> EpochRecord {
        EpochRecord { seconds: 0.0, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxEpochs,
    Diverged,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainLog {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// The series watched by the stopping rule: reconstruction losses when
    /// a reconstruction pipeline ran, classification losses otherwise.
    pub fn monitored_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss_r.unwrap_or(r.loss_c)).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("epoch,loss_c,loss_r,src_val_acc,tgt_acc,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch,
                r.loss_c,
                opt(r.loss_r),
                opt(r.src_val_acc),
                opt(r.tgt_acc),
                r.seconds
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the last `window` losses satisfy `(max − min) / max < tol`.
/// Fewer than `window` losses always continue.
pub fn stopping_rule(losses: &[f64], window: usize, tol: f64) -> StopDecision {
    if window < 2 || losses.len() < window {
        return StopDecision::Continue;
    }
    let tail = &losses[losses.len() - window..];
    let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = if max == min { 0.0 } else { (max - min) / max };
    if spread < tol {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// The image pool for the reconstruction pipeline.
pub fn select_unsupervised_pool(
    flavor: Flavor,
    source: &UnlabeledSet,
    target: Option<&UnlabeledSet>,
) -> Result<UnlabeledSet> {
    let target_images = || {
        target
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::Argument(format!("flavor `{}` needs unlabeled target images", flavor.as_str())))
    };
    let pool = match flavor {
        Flavor::TargetOnly => target_images()?.clone(),
        Flavor::SourceOnly => source.clone(),
        Flavor::SourceTarget => {
            let t = target_images()?;
            let mut provenance = source.provenance.clone();
            provenance.push(format!("concat({})", t.provenance.join(" > ")));
            UnlabeledSet {
                images: Tensor::concat(&source.images, &t.images)?,
                provenance,
            }
        }
    };
    if pool.is_empty() {
        return Err(Error::Argument("unsupervised pool is empty".into()));
    }
    Ok(pool)
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Evaluation-mode argmax predictions.
pub fn predict(model: &DrcnModel, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let probs = model.predict_proba(&images.select(&idx))?;
        let m = probs.shape()[1];
        out.extend(probs.data().chunks(m).map(argmax));
    }
    Ok(out)
}

/// Fraction of predictions that match `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Argument("cannot compute accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(model: &DrcnModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument(format!("cannot evaluate on empty dataset `{}`", data.name())));
    }
    let labels = data.labels()?;
    accuracy(&predict(model, &data.images)?, labels)
}

/// Seeded `(train, validation)` split of the labeled source set.
pub fn split_source(source: &Dataset, cfg: &TrainConfig) -> (Dataset, Dataset) {
    source.split(cfg.val_fraction, &mut Rng::substream(cfg.seed, "split.source"))
}

/// Where training is when an observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// All source batches of `epoch` have been processed.
    SourceDone { epoch: usize },
    /// All target batches of `epoch` have been processed.
    TargetDone { epoch: usize },
}

type Observer<'a> = Box<dyn FnMut(Phase, &DrcnModel) + 'a>;

/// Runs the alternating training loop.
///
/// Each epoch first sweeps every source batch with a classification step of
/// size `lr_c·λ`, then every pool batch with a reconstruction step of size
/// `lr_r·(1 − λ)`. Source batches are geometrically augmented and pool
/// batches corrupted according to the config; each pipeline draws from its
/// own random substreams, so the source trajectory does not depend on
/// whether a reconstruction pipeline exists.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    target_eval: Option<&'a Dataset>,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig) -> Self {
        Trainer {
            cfg,
            target_eval: None,
            observer: None,
        }
    }

    /// Labeled target data used only to report per-epoch accuracy.
    pub fn eval_target(mut self, data: &'a Dataset) -> Self {
        self.target_eval = Some(data);
        self
    }

    pub fn observe(mut self, f: impl FnMut(Phase, &DrcnModel) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Trains `model` in place. `source` is split into training and
    /// validation parts; `pool` feeds the reconstruction pipeline and is
    /// ignored by models without a decoder.
    pub fn run(mut self, model: &mut DrcnModel, source: &Dataset, pool: Option<&UnlabeledSet>) -> Result<TrainLog> {
        let cfg = self.cfg.clone();
        cfg.validate()?;
        source.labels()?;
        if source.image_shape() != model.spec().input {
            return Err(Error::Dimension(format!(
                "source images {:?} do not match model input {:?}",
                source.image_shape(),
                model.spec().input
            )));
        }
        if source.classes != model.spec().classes {
            return Err(Error::Dimension(format!(
                "source has {} classes, model has {}",
                source.classes,
                model.spec().classes
            )));
        }
        let pool = if model.has_decoder() { pool } else { None };
        if let Some(p) = pool {
            if p.image_shape() != model.spec().input {
                return Err(Error::Dimension(format!(
                    "pool images {:?} do not match model input {:?}",
                    p.image_shape(),
                    model.spec().input
                )));
            }
            if p.is_empty() {
                return Err(Error::Argument("unsupervised pool is empty".into()));
            }
        }

        let (train_set, val_set) = split_source(source, &cfg);
        if train_set.is_empty() {
            return Err(Error::Argument("no source images left for training after the validation split".into()));
        }
        let onehot = one_hot(train_set.labels()?, train_set.classes)?;

        let mut src_shuffle = Rng::substream(cfg.seed, "train.source.shuffle");
        let mut src_augment = Rng::substream(cfg.seed, "train.source.augment");
        let mut src_dropout = Rng::substream(cfg.seed, "train.source.dropout");
        let mut tgt_shuffle = Rng::substream(cfg.seed, "train.target.shuffle");
        let mut tgt_noise = Rng::substream(cfg.seed, "train.target.noise");
        let mut opt_c = RmspropState::new(cfg.lr_c, cfg.decay, DEFAULT_EPSILON)?;
        let mut opt_r = RmspropState::new(cfg.lr_r, cfg.decay, DEFAULT_EPSILON)?;
        let scale_c = cfg.lambda;
        let scale_r = 1.0 - cfg.lambda;

        let mut records = Vec::new();
        let mut stop = StopReason::MaxEpochs;
        for epoch in 1..=cfg.max_epochs {
            let started = Instant::now();
            let context = |pipeline: &str, e: Error| match e {
                Error::Training(m) => Error::Training(format!("epoch {epoch}, {pipeline} pipeline: {m}")),
                other => other,
            };

            let mut order: Vec<usize> = (0..train_set.len()).collect();
            src_shuffle.shuffle(&mut order);
            let mut sum_c = 0.0;
            for idx in order.chunks(cfg.batch_source) {
                let clean = train_set.images.select(idx);
                let batch = if cfg.augment {
                    augment_batch(&clean, &cfg.noise, &mut src_augment)?
                } else {
                    clean
                };
                let y = onehot.select(idx);
                let loss = if scale_c > 0.0 {
                    let (loss, grads) = model.classification_grads(&batch, &y, Some(&mut src_dropout))?;
                    check_loss(loss.value, epoch, "classification")?;
                    model
                        .apply_classifier_update(&grads, &mut opt_c, scale_c)
                        .map_err(|e| context("classification", e))?;
                    loss
                } else {
                    model.classification_loss(&batch, &y, Some(&mut src_dropout))?
                };
                check_loss(loss.value, epoch, "classification")?;
                sum_c += loss.value * idx.len() as f64;
            }
            let loss_c = sum_c / train_set.len() as f64;
            if let Some(f) = self.observer.as_mut() {
                f(Phase::SourceDone { epoch }, model);
            }

            let loss_r = match pool {
                Some(p) => {
                    let mut order: Vec<usize> = (0..p.len()).collect();
                    tgt_shuffle.shuffle(&mut order);
                    let mut sum_r = 0.0;
                    for idx in order.chunks(cfg.batch_target) {
                        let clean = p.images.select(idx);
                        let noisy = if cfg.denoise {
                            corrupt_batch(&clean, &cfg.noise, &mut tgt_noise)?
                        } else {
                            clean.clone()
                        };
                        let loss = if scale_r > 0.0 {
                            let (loss, grads) = model.reconstruction_grads(&noisy, &clean)?;
                            check_loss(loss.value, epoch, "reconstruction")?;
                            model
                                .apply_reconstruction_update(&grads, &mut opt_r, scale_r)
                                .map_err(|e| context("reconstruction", e))?;
                            loss
                        } else {
                            model.reconstruction_loss(&noisy, &clean)?
                        };
                        check_loss(loss.value, epoch, "reconstruction")?;
                        sum_r += loss.value * idx.len() as f64;
                    }
                    if let Some(f) = self.observer.as_mut() {
                        f(Phase::TargetDone { epoch }, model);
                    }
                    Some(sum_r / p.len() as f64)
                }
                None => None,
            };

            let src_val_acc = if val_set.is_empty() { None } else { Some(evaluate(model, &val_set)?) };
            let tgt_acc = self.target_eval.map(|d| evaluate(model, d)).transpose()?;
            records.push(EpochRecord {
                epoch,
                loss_c,
                loss_r,
                src_val_acc,
                tgt_acc,
                seconds: started.elapsed().as_secs_f64(),
            });
            let monitored: Vec<f64> = records.iter().map(|r| r.loss_r.unwrap_or(r.loss_c)).collect();
            if stopping_rule(&monitored, cfg.stop_window, cfg.stop_tolerance) == StopDecision::Stop {
                stop = StopReason::Converged;
                break;
            }
        }
        Ok(TrainLog { records, stop })
    }
}

fn check_loss(value: f64, epoch: usize, pipeline: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("epoch {epoch}, {pipeline} pipeline: non-finite loss {value}")))
    }
}

/// Convenience wrapper around [`Trainer`] without evaluation data or
/// observers.
pub fn train(model: &mut DrcnModel, source: &Dataset, pool: Option<&UnlabeledSet>, cfg: &TrainConfig) -> Result<TrainLog> {
    Trainer::new(cfg.clone()).run(model, source, pool)
}
