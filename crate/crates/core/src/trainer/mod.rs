//! The alternating supernet search.
//!
//! Warmup epochs train only the weights. Afterwards every epoch runs a
//! weight pass over the weight split (SGD with momentum, cosine learning
//! rate) followed by a theta pass over the theta split (Adam) with the
//! weights frozen. The Gumbel temperature follows a cosine decay from
//! `tau_init` to `tau_min`. A theta snapshot and one CSV row per phase are
//! written after every epoch when a log directory is configured.

mod optim;

pub use optim::{cosine_lr, Adam, AdamConfig, Sgd, SgdConfig};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::costmodel::CostTable;
use crate::data::{shuffled_batches, stratified_split, Dataset};
use crate::network::Network;
use crate::searchspace::MacroArch;
use crate::supernet::{
    sample_gumbel, supernet_forward, total_loss, LossBreakdown, LossKnobs, Theta,
};
use crate::{Error, Result};

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Init = 0,
    Split = 1,
    Shuffle = 2,
    Gumbel = 3,
}

pub(crate) fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training data used for weight updates.
    pub split: f64,
    pub weight_opt: SgdConfig,
    pub theta_opt: AdamConfig,
    pub tau_init: f64,
    pub tau_min: f64,
    pub seed: u64,
    pub knobs: LossKnobs,
    pub log_dir: Option<PathBuf>,
    /// Sequential, fixed-order iteration. The loop is single-threaded, so
    /// this is always honoured; the flag is recorded for the CLI contract.
    pub strict: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 90,
            warmup_epochs: 10,
            batch_size: 256,
            split: 0.8,
            weight_opt: SgdConfig::default(),
            theta_opt: AdamConfig::default(),
            tau_init: 5.0,
            tau_min: 0.1,
            seed: 0,
            knobs: LossKnobs::default(),
            log_dir: None,
            strict: true,
        }
    }
}

impl SearchConfig {
    /// Laptop-scale defaults: 20 epochs, 4 warmup, batches of 64, weight
    /// learning rate 0.03.
    pub fn desk() -> Self {
        SearchConfig {
            epochs: 20,
            warmup_epochs: 4,
            batch_size: 64,
            weight_opt: SgdConfig {
                lr: 0.03,
                ..SgdConfig::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(format!(
                "need warmup_epochs ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::invalid(format!("split {} outside (0, 1)", self.split)));
        }
        if !(self.tau_min > 0.0 && self.tau_init >= self.tau_min) {
            return Err(Error::invalid("need tau_init >= tau_min > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.knobs.validate()
    }
}

/// Means of one phase. `total` is the loss formula applied to the mean
/// parts, so it can be recomputed from the logged columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseStats {
    pub ce: f64,
    pub lat: f64,
    pub ener: f64,
    pub total: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub tau: f64,
    pub weights: PhaseStats,
    /// `None` during warmup.
    pub theta: Option<PhaseStats>,
    pub theta_file: Option<PathBuf>,
}

pub const LOG_HEADER: &str = "epoch,phase,tau,ce,lat,ener,total,acc";

impl EpochLog {
    pub fn csv_rows(&self) -> Vec<String> {
        let row = |phase: &str, s: &PhaseStats| {
            format!(
                "{},{phase},{},{},{},{},{},{}",
                self.epoch, self.tau, s.ce, s.lat, s.ener, s.total, s.acc
            )
        };
        let mut out = vec![row("weights", &self.weights)];
        if let Some(t) = &self.theta {
            out.push(row("theta", t));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub theta: Theta,
    pub logs: Vec<EpochLog>,
    pub weights: Network,
}

/// Seeded, class-stratified split into `(weight_set, theta_set)`.
pub fn split_dataset(dataset: &Dataset, split: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    stratified_split(dataset, split, seed)
}

/// Cosine temperature: `tau_init` at epoch 0, `tau_min` at the last epoch.
pub fn tau_at(epoch: usize, config: &SearchConfig) -> f64 {
    if config.epochs <= 1 {
        return config.tau_init;
    }
    let frac = epoch.min(config.epochs - 1) as f64 / (config.epochs - 1) as f64;
    config.tau_min
        + 0.5 * (config.tau_init - config.tau_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Uniform logits of 1.0 over admissible cells.
pub fn theta_init(arch: &MacroArch) -> Theta {
    Theta::constant(arch, 1.0)
}

/// Fresh supernet weights from the run seed.
pub fn weights_init(arch: &MacroArch, seed: u64) -> Result<Network> {
    Network::supernet(arch, &mut stream_rng(seed, Stream::Init))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Weights,
    Theta,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Weights => "weights",
            Phase::Theta => "theta",
        }
    }
}

struct Search<'a> {
    config: &'a SearchConfig,
    arch: &'a MacroArch,
    tables: (&'a CostTable, &'a CostTable),
    weights: Network,
    theta: Theta,
    sgd: Sgd,
    adam: Adam,
    shuffle_rng: ChaCha8Rng,
    gumbel_rng: ChaCha8Rng,
}

impl Search<'_> {
    fn pass(&mut self, data: &Dataset, phase: Phase, epoch: usize, tau: f64, lr: f64) -> Result<PhaseStats> {
        let batches = shuffled_batches(data.len(), self.config.batch_size, &mut self.shuffle_rng);
        let (mut ce, mut lat, mut ener) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let non_finite = || Error::NonFinite {
            epoch,
            phase: phase.name().to_string(),
        };
        for idx in &batches {
            let (xb, labels) = data.batch(idx);
            let noise = sample_gumbel(&mut self.gumbel_rng, self.theta.rows(), self.theta.cols());
            let mut g = Graph::new();
            let wv = self.weights.register(&mut g, phase == Phase::Weights);
            let tv = self.theta.register(&mut g, phase == Phase::Theta);
            let x = g.leaf(&xb);
            let out = supernet_forward(&mut g, self.arch, &wv, x, tv, &noise, tau, self.tables)?;
            let ce_v = g.softmax_cross_entropy(out.logits, &labels)?;
            let (loss, parts) =
                total_loss(&mut g, ce_v, out.lat, out.ener, &self.config.knobs).map_err(|_| non_finite())?;
            if !parts.total.is_finite() {
                return Err(non_finite());
            }
            g.backward(loss)?;
            match phase {
                Phase::Weights => {
                    self.weights.zero_grad();
                    self.weights.accumulate_grads(&g, &wv)?;
                    self.sgd.step(self.weights.tensors_mut(), lr);
                }
                Phase::Theta => {
                    let grad = g.grad(tv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.theta.logits().len()]);
                    self.adam.step(self.theta.logits_mut(), &grad);
                }
            }
            let n = labels.len() as f64;
            ce += parts.ce * n;
            lat += parts.lat * n;
            ener += parts.ener * n;
            correct += count_correct(g.value(out.logits), &labels);
        }
        let n = data.len() as f64;
        let (ce, lat, ener) = (ce / n, lat / n, ener / n);
        let total = LossBreakdown::compute(ce, lat, ener, &self.config.knobs)
            .map_err(|_| non_finite())?
            .total;
        Ok(PhaseStats {
            ce,
            lat,
            ener,
            total,
            acc: correct as f64 / n,
        })
    }
}

/// Number of rows of `[N, K]` logits whose argmax equals the label.
pub fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| crate::supernet::argmax_low(&logits[i * k..][..k]) == l)
        .count()
}

struct LogSink {
    dir: PathBuf,
    csv: BufWriter<File>,
}

impl LogSink {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("search_log.csv"))?);
        writeln!(csv, "{LOG_HEADER}")?;
        Ok(LogSink {
            dir: dir.to_path_buf(),
            csv,
        })
    }

    fn record(&mut self, log: &EpochLog, theta: &Theta) -> Result<PathBuf> {
        let path = self.dir.join(format!("theta_epoch_{}.txt", log.epoch));
        theta.save(&path, log.epoch, log.tau)?;
        for row in log.csv_rows() {
            writeln!(self.csv, "{row}")?;
        }
        self.csv.flush()?;
        Ok(path)
    }
}

/// Runs the full search and returns the final theta, per-epoch logs and
/// the trained supernet weights.
pub fn run_search(
    config: &SearchConfig,
    arch: &MacroArch,
    tables: (&CostTable, &CostTable),
    dataset: &Dataset,
) -> Result<SearchResult> {
    config.validate()?;
    tables.0.check_matches(arch)?;
    tables.1.check_matches(arch)?;
    if dataset.sample_shape != [arch.input_channels, arch.input_hw.0, arch.input_hw.1] {
        return Err(Error::shape(format!(
            "dataset samples {:?} do not match architecture input {}x{}x{}",
            dataset.sample_shape, arch.input_channels, arch.input_hw.0, arch.input_hw.1
        )));
    }
    if dataset.num_classes != arch.num_classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, architecture {}",
            dataset.num_classes, arch.num_classes
        )));
    }
    let (weight_set, theta_set) = split_dataset(dataset, config.split, {
        use rand::RngCore;
        stream_rng(config.seed, Stream::Split).next_u64()
    })?;
    let mut search = Search {
        config,
        arch,
        tables,
        weights: weights_init(arch, config.seed)?,
        theta: theta_init(arch),
        sgd: Sgd::new(config.weight_opt),
        adam: Adam::new(config.theta_opt),
        shuffle_rng: stream_rng(config.seed, Stream::Shuffle),
        gumbel_rng: stream_rng(config.seed, Stream::Gumbel),
    };
    let mut sink = config.log_dir.as_deref().map(LogSink::open).transpose()?;
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let tau = tau_at(epoch, config);
        let lr = cosine_lr(config.weight_opt.lr, epoch, config.epochs);
        let weights = search.pass(&weight_set, Phase::Weights, epoch, tau, lr)?;
        let theta = if epoch >= config.warmup_epochs {
            Some(search.pass(&theta_set, Phase::Theta, epoch, tau, lr)?)
        } else {
            None
        };
        let mut log = EpochLog {
            epoch,
            tau,
            weights,
            theta,
            theta_file: None,
        };
        if let Some(s) = sink.as_mut() {
            log.theta_file = Some(s.record(&log, &search.theta)?);
        }
        log::info!(
            "epoch {epoch} tau {tau:.3} ce {:.4} lat {:.4} ener {:.4} acc {:.3}",
            weights.ce,
            weights.lat,
            weights.ener,
            weights.acc
        );
        logs.push(log);
    }
    Ok(SearchResult {
        theta: search.theta,
        logs,
        weights: search.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{build_macro, ArchSource};

    #[test]
    fn tau_schedule_endpoints() {
        let c = SearchConfig {
            epochs: 21,
            ..SearchConfig::desk()
        };
        assert_eq!(tau_at(0, &c), 5.0);
        assert!((tau_at(20, &c) - 0.1).abs() < 1e-15);
        assert!((tau_at(10, &c) - 2.55).abs() < 1e-12);
    }

    #[test]
    fn theta_init_is_uniform() {
        let arch = build_macro(ArchSource::Preset("desk"), 4).unwrap();
        let t = theta_init(&arch);
        let p = t.probabilities();
        for (l, layer) in arch.tbs_layers.iter().enumerate() {
            let row = &p[l * 9..][..9];
            let n = if layer.skip_admissible() { 9.0 } else { 8.0 };
            for (c, &v) in row.iter().enumerate() {
                if layer.admits(c) {
                    assert!((v - 1.0 / n).abs() < 1e-15);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SearchConfig::desk();
        assert!(c.validate().is_ok());
        c.warmup_epochs = c.epochs;
        assert!(c.validate().is_err());
        let c = SearchConfig {
            split: 1.0,
            ..SearchConfig::desk()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn weight_init_is_seeded() {
        let arch = build_macro(ArchSource::Preset("desk:2"), 4).unwrap();
        assert_eq!(weights_init(&arch, 7).unwrap(), weights_init(&arch, 7).unwrap());
        assert_ne!(weights_init(&arch, 7).unwrap(), weights_init(&arch, 8).unwrap());
    }
}
