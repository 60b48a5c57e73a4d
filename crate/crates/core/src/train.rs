//! The training loop, evaluation, metrics CSV and resumable checkpoints.
//!
//! Randomness is split by purpose: network initialization draws from stream
//! 0 of the run seed, and epoch `e` (0-indexed) draws its shuffle and
//! augmentation from stream `1 + e`. Two runs that differ only in the block
//! variant therefore see the same images in the same order, and a resumed run
//! replays exactly what an uninterrupted run would have done.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{
    augment_batch, batch_order, compute_normalization, load, normalize_in_place, Dataset, LabeledImageSet, Limits,
    NormalizationMode, NormalizationStats,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_blob, write_blob};
use crate::model::{build_network, load_checkpoint, save_checkpoint, Manifest, Network, NetworkConfig};
use crate::ops::{count_errors, softmax_cross_entropy, Mode};
use crate::optim::{Sgd, TrainSchedule};
use crate::tensor::Rng;

pub const CSV_HEADER: &str = "epoch,train_loss,train_error,test_error,lr,wall_seconds,diverged";
pub const DEFAULT_EVAL_BATCH: usize = 500;

const INIT_STREAM: u64 = 0;

/// Stream feeding the shuffle and augmentation of 0-indexed epoch `epoch`.
pub fn epoch_stream(epoch: usize) -> u64 {
    1 + epoch as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub lr: f64,
    /// Seconds since the start of this process's training loop.
    pub wall_seconds: f64,
    pub diverged: bool,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{}",
            self.epoch, self.train_loss, self.train_error, self.test_error, self.lr, self.wall_seconds, self.diverged
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::invalid("metrics csv", format!("malformed row: {line}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: num(1)?,
            train_error: num(2)?,
            test_error: num(3)?,
            lr: num(4)?,
            wall_seconds: num(5)?,
            diverged: f[6].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub data_dir: PathBuf,
    pub network: NetworkConfig,
    pub schedule: TrainSchedule,
    pub normalization: NormalizationMode,
    pub limits: Limits,
    pub eval_batch_size: usize,
    pub metrics_path: Option<PathBuf>,
    /// Final checkpoint; LR-boundary checkpoints go next to it with an
    /// `.epoch-K` suffix.
    pub checkpoint_path: Option<PathBuf>,
    /// Resume from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(dataset: Dataset, data_dir: impl Into<PathBuf>, network: NetworkConfig) -> Self {
        Self {
            dataset,
            data_dir: data_dir.into(),
            network,
            schedule: TrainSchedule::default(),
            normalization: NormalizationMode::default(),
            limits: Limits::default(),
            eval_batch_size: DEFAULT_EVAL_BATCH,
            metrics_path: None,
            checkpoint_path: None,
            resume: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        if self.network.classes != self.dataset.classes() {
            return Err(Error::invalid(
                "RunConfig",
                format!(
                    "network has {} classes but {} has {}",
                    self.network.classes,
                    self.dataset,
                    self.dataset.classes()
                ),
            ));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::invalid("RunConfig", "eval batch size must be at least 1"));
        }
        Ok(())
    }

    /// Completed-epoch counts after which a checkpoint is written: every LR
    /// decay boundary inside the run, plus the last epoch.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let total = self.schedule.total_epochs;
        let mut out: Vec<usize> = self
            .schedule
            .decay_epochs
            .iter()
            .copied()
            .filter(|&d| d > 0 && d < total)
            .collect();
        out.push(total);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub history: Vec<EpochMetrics>,
    pub stats: NormalizationStats,
    /// Why training stopped early, if it did.
    pub divergence: Option<String>,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn final_epoch(&self) -> Option<&EpochMetrics> {
        self.history.last()
    }

    /// Epoch with the lowest test error (earliest on ties).
    pub fn best_epoch(&self) -> Option<&EpochMetrics> {
        self.history
            .iter()
            .filter(|m| m.test_error.is_finite())
            .fold(None, |best: Option<&EpochMetrics>, m| match best {
                Some(b) if b.test_error <= m.test_error => Some(b),
                _ => Some(m),
            })
    }

    pub fn summary(&self, cfg: &RunConfig) -> Manifest {
        let mut m = Manifest::new();
        put_stats(&mut m, &self.stats);
        m.set("dataset", cfg.dataset)
            .set("variant", cfg.network.variant)
            .set("depth", cfg.network.depth())
            .set("seed", cfg.schedule.seed)
            .set("epochs_completed", self.final_epoch().map_or(0, |f| f.epoch))
            .set("diverged", self.diverged());
        if let Some(reason) = &self.divergence {
            m.set("divergence", reason.replace('\n', " "));
        }
        if let Some(f) = self.final_epoch() {
            m.set("final_epoch", f.epoch).set("final_test_error", f.test_error);
        }
        if let Some(b) = self.best_epoch() {
            m.set("best_epoch", b.epoch).set("best_test_error", b.test_error);
        }
        m
    }
}

fn put_stats(m: &mut Manifest, stats: &NormalizationStats) {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    m.set("normalization", stats.mode)
        .set("norm_mean", join(&stats.mean))
        .set("norm_std", join(&stats.std));
}

pub fn stats_from_manifest(m: &Manifest) -> Result<NormalizationStats> {
    let triple = |key: &str| -> Result<[f64; 3]> {
        let raw = m
            .get(key)
            .ok_or_else(|| Error::invalid("manifest", format!("missing key '{key}'")))?;
        let v: Vec<f64> = raw
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid("manifest", format!("bad value for '{key}'")))?;
        v.try_into()
            .map_err(|_| Error::invalid("manifest", format!("'{key}' needs three values")))
    };
    Ok(NormalizationStats {
        mode: m.parse_value::<String>("normalization")?.parse()?,
        mean: triple("norm_mean")?,
        std: triple("norm_std")?,
    })
}

/// Top-1 error in percent, infer-mode BN, no augmentation. Rows with
/// non-finite logits count as wrong.
pub fn evaluate(net: &Network<f32>, set: &LabeledImageSet, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation set"));
    }
    let mut wrong = 0;
    for batch in batch_order(set.len(), batch_size, None)? {
        let (x, labels) = set.gather(&batch)?;
        let (logits, _) = net.forward_observed(&x, Mode::Infer, &mut |_, _| {})?;
        wrong += count_errors(&logits, &labels);
    }
    Ok(100.0 * wrong as f64 / set.len() as f64)
}

fn momentum_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".momentum");
    PathBuf::from(os)
}

pub fn boundary_checkpoint_path(path: &Path, epoch: usize) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(format!(".epoch-{epoch}"));
    PathBuf::from(os)
}

pub fn summary_path(metrics: &Path) -> PathBuf {
    let mut os = metrics.as_os_str().to_owned();
    os.push(".summary");
    PathBuf::from(os)
}

fn save_training_state(
    path: &Path,
    net: &Network<f32>,
    sgd: &Sgd<f32>,
    cfg: &RunConfig,
    stats: &NormalizationStats,
    row: &EpochMetrics,
) -> Result<()> {
    let s = &cfg.schedule;
    let mut m = Manifest::new();
    put_stats(&mut m, stats);
    let decay = s.decay_epochs.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    m.set("dataset", cfg.dataset)
        .set("seed", s.seed)
        .set("epoch", row.epoch)
        .set("test_error", row.test_error)
        .set("wall_seconds", row.wall_seconds)
        .set("lr", row.lr)
        .set("base_lr", s.base_lr)
        .set("decay_epochs", decay)
        .set("decay_factor", s.decay_factor)
        .set("momentum", s.momentum)
        .set("weight_decay", s.weight_decay)
        .set("batch_size", s.batch_size)
        .set("total_epochs", s.total_epochs)
        .set("decay_all_params", s.decay_all_params);
    if let Some(l) = cfg.limits.train {
        m.set("train_limit", l);
    }
    if let Some(l) = cfg.limits.test {
        m.set("test_limit", l);
    }
    save_checkpoint(path, net, &m)?;
    write_blob(&momentum_path(path), &sgd.flat_velocity())
}

struct MetricsSink {
    file: Option<fs::File>,
}

impl MetricsSink {
    /// Starts a fresh CSV, or (when resuming after `keep_through` epochs)
    /// keeps the existing header and the rows up to that epoch.
    fn open(path: Option<&Path>, keep_through: usize) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { file: None });
        };
        let mut text = format!("{CSV_HEADER}\n");
        if keep_through > 0 {
            if let Ok(old) = fs::read_to_string(path) {
                for line in old.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                    if EpochMetrics::from_csv_row(line)?.epoch <= keep_through {
                        let _ = writeln!(text, "{line}");
                    }
                }
            }
        }
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file: Some(file) })
    }

    fn push(&mut self, row: &EpochMetrics, path: Option<&Path>) -> Result<()> {
        if let (Some(file), Some(path)) = (&mut self.file, path) {
            writeln!(file, "{}", row.csv_row()).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::format(path, "missing metrics header"));
    }
    lines.filter(|l| !l.trim().is_empty()).map(EpochMetrics::from_csv_row).collect()
}

/// Loads the dataset named in `cfg` and trains on it.
pub fn run(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = load(cfg.dataset, &cfg.data_dir, cfg.limits)?;
    train(cfg, train_set, test_set, on_epoch)
}

/// Trains on raw (un-normalized) sets. Normalization statistics come from
/// `train_set` and are applied to both sets. Divergence is not an error: it
/// ends the run and is reported in the outcome and in the last CSV row.
pub fn train(
    cfg: &RunConfig,
    mut train_set: LabeledImageSet,
    mut test_set: LabeledImageSet,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::invalid("train", "training and test sets must be non-empty"));
    }
    let sched = &cfg.schedule;
    let stats = compute_normalization(&train_set, cfg.normalization)?;
    normalize_in_place(&mut train_set, &stats)?;
    normalize_in_place(&mut test_set, &stats)?;

    let (mut net, mut sgd, start_epoch, wall_offset) = match &cfg.resume {
        Some(path) => {
            let (net, manifest) = load_checkpoint(path)?;
            if net.config() != &cfg.network {
                return Err(Error::invalid(
                    "resume",
                    format!("checkpoint network {:?} differs from requested {:?}", net.config(), cfg.network),
                ));
            }
            let mut sgd = Sgd::new(&net.param_infos(), sched);
            sgd.load_flat_velocity(&read_blob(&momentum_path(path))?)?;
            let epoch: usize = manifest.parse_value("epoch")?;
            let wall: f64 = manifest.parse_value("wall_seconds")?;
            (net, sgd, epoch, wall)
        }
        None => {
            let net = build_network::<f32>(&cfg.network, &mut Rng::with_stream(sched.seed, INIT_STREAM))?;
            let sgd = Sgd::new(&net.param_infos(), sched);
            (net, sgd, 0, 0.0)
        }
    };

    let metrics_path = cfg.metrics_path.as_deref();
    let mut sink = MetricsSink::open(metrics_path, start_epoch)?;
    let checkpoint_epochs = cfg.checkpoint_epochs();
    let started = Instant::now();
    let mut history = Vec::new();
    let mut divergence = None;

    for epoch in start_epoch..sched.total_epochs {
        let lr = sched.lr_at_epoch(epoch);
        let mut rng = Rng::with_stream(sched.seed, epoch_stream(epoch));
        let mut loss_sum = 0.0f64;
        let mut wrong = 0usize;
        let mut seen = 0usize;

        for batch in batch_order(train_set.len(), sched.batch_size, Some(&mut rng))? {
            let (x, labels) = train_set.gather(&batch)?;
            let x = augment_batch(&x, &mut rng)?;
            let step = (|| -> Result<()> {
                let (logits, cache) = net.forward(&x, Mode::Train)?;
                let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
                loss_sum += loss as f64 * labels.len() as f64;
                wrong += count_errors(&logits, &labels);
                seen += labels.len();
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                let grads = net.backward(&cache, &grad)?;
                sgd.step(net.params_mut(), &grads.entries, lr)?;
                net.commit_running_stats(&cache);
                Ok(())
            })();
            match step {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    divergence = Some(format!("non-finite {what} in epoch {}", epoch + 1));
                    if seen == 0 {
                        loss_sum = f64::NAN;
                    }
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            train_error: 100.0 * wrong as f64 / seen.max(1) as f64,
            test_error: evaluate(&net, &test_set, cfg.eval_batch_size)?,
            lr,
            wall_seconds: wall_offset + started.elapsed().as_secs_f64(),
            diverged: divergence.is_some(),
        };
        sink.push(&row, metrics_path)?;
        on_epoch(&row);
        let done = row.epoch;
        history.push(row);
        if divergence.is_some() {
            break;
        }
        if let Some(path) = &cfg.checkpoint_path {
            if checkpoint_epochs.contains(&done) {
                let target = if done == sched.total_epochs {
                    path.clone()
                } else {
                    boundary_checkpoint_path(path, done)
                };
                save_training_state(&target, &net, &sgd, cfg, &stats, history.last().expect("row pushed"))?;
            }
        }
    }

    let outcome = RunOutcome {
        history,
        stats,
        divergence,
    };
    if let Some(path) = metrics_path {
        let spath = summary_path(path);
        fs::write(&spath, outcome.summary(cfg).to_text()).map_err(|e| Error::io(&spath, e))?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub test_error: f64,
    pub recorded_test_error: Option<f64>,
    pub images: usize,
    pub epoch: Option<usize>,
}

/// Re-evaluates a checkpoint with the normalization statistics it was trained
/// with. Unless overridden, the test subset size recorded in the checkpoint
/// is reused so the error is comparable to the recorded one.
pub fn evaluate_checkpoint(
    path: &Path,
    dataset: Option<Dataset>,
    data_dir: &Path,
    test_limit: Option<usize>,
    batch_size: usize,
) -> Result<EvalReport> {
    let (net, manifest) = load_checkpoint(path)?;
    let recorded: Option<Dataset> = manifest.get("dataset").map(str::parse).transpose()?;
    let dataset = dataset.or(recorded).unwrap_or(Dataset::Cifar10);
    if net.config().classes != dataset.classes() {
        return Err(Error::invalid(
            "eval",
            format!("checkpoint has {} classes, {} has {}", net.config().classes, dataset, dataset.classes()),
        ));
    }
    let test_limit = match test_limit {
        Some(l) => Some(l),
        None => manifest.get("test_limit").map(|_| manifest.parse_value("test_limit")).transpose()?,
    };
    let stats = stats_from_manifest(&manifest)?;
    let (_, mut test) = load(
        dataset,
        data_dir,
        Limits {
            train: Some(0),
            test: test_limit,
        },
    )?;
    normalize_in_place(&mut test, &stats)?;
    Ok(EvalReport {
        test_error: evaluate(&net, &test, batch_size)?,
        recorded_test_error: manifest.get("test_error").map(|_| manifest.parse_value("test_error")).transpose()?,
        images: test.len(),
        epoch: manifest.get("epoch").map(|_| manifest.parse_value("epoch")).transpose()?,
    })
}
