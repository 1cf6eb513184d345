//! Discrete child architectures extracted from a trained theta.

use std::fs;
use std::path::Path;

use crate::autodiff::Graph;
use crate::costmodel::CostTable;
use crate::data::{shuffled_batches, Dataset};
use crate::network::{self, Network};
use crate::searchspace::MacroArch;
use crate::supernet::{argmax_low, Theta};
use crate::trainer::{cosine_lr, count_correct, stream_rng, Sgd, SgdConfig, Stream};
use crate::{Error, Result};

/// One chosen column per searchable layer of the named architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChildNet {
    pub arch: String,
    pub choices: Vec<usize>,
}

impl ChildNet {
    pub fn validate(&self, arch: &MacroArch) -> Result<()> {
        if self.choices.len() != arch.num_tbs() {
            return Err(Error::shape(format!(
                "child has {} choices, architecture '{}' has {} searchable layers",
                self.choices.len(),
                arch.name,
                arch.num_tbs()
            )));
        }
        for (l, (&c, layer)) in self.choices.iter().zip(&arch.tbs_layers).enumerate() {
            if !layer.admits(c) {
                return Err(Error::invalid(format!(
                    "layer {l}: column {c} is not an admissible candidate"
                )));
            }
        }
        Ok(())
    }

    /// `# arch=<name> layers=<L>` then one comma-separated line of columns.
    pub fn to_text(&self) -> String {
        let cols: Vec<String> = self.choices.iter().map(usize::to_string).collect();
        format!(
            "# arch={} layers={}\n{}\n",
            self.arch,
            self.choices.len(),
            cols.join(",")
        )
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(origin, 1, "empty file"))?;
        let f = crate::costmodel::parse_header(header, origin, &["arch", "layers"])?;
        let layers = crate::costmodel::parse_count(&f[1], origin, "layers")?;
        let body = lines
            .next()
            .ok_or_else(|| Error::format(origin, 2, "missing choice line"))?;
        let choices = body
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(origin, 2, format!("'{s}' is not a column index")))
            })
            .collect::<Result<Vec<_>>>()?;
        if choices.len() != layers {
            return Err(Error::format(
                origin,
                2,
                format!("header declares {layers} layers, found {} choices", choices.len()),
            ));
        }
        Ok(ChildNet {
            arch: f[0].clone(),
            choices,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

/// Most probable admissible column of every theta row; ties go to the
/// lowest index.
pub fn sample_childnet(theta: &Theta, arch: &MacroArch) -> Result<ChildNet> {
    theta.check_matches(arch)?;
    let choices = (0..theta.rows()).map(|l| argmax_low(theta.row(l))).collect();
    Ok(ChildNet {
        arch: arch.name.clone(),
        choices,
    })
}

/// Exact `(seconds, joules)` of a child from the two lookup tables.
pub fn childnet_cost(child: &ChildNet, lat: &CostTable, ener: &CostTable) -> Result<(f64, f64)> {
    let mut totals = [0.0, 0.0];
    for (total, table) in totals.iter_mut().zip([lat, ener]) {
        if table.num_layers() != child.choices.len() {
            return Err(Error::shape(format!(
                "{} table has {} rows for {} choices",
                table.metric,
                table.num_layers(),
                child.choices.len()
            )));
        }
        for (l, &c) in child.choices.iter().enumerate() {
            *total += table.get(l, c).ok_or_else(|| {
                Error::invalid(format!("{} table cell ({l}, {c}) is absent", table.metric))
            })?;
        }
    }
    Ok((totals[0], totals[1]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChildTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for ChildTrainConfig {
    fn default() -> Self {
        ChildTrainConfig {
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl ChildTrainConfig {
    /// Laptop-scale settings: 10 epochs at learning rate 0.01. Without
    /// normalization layers, 0.03 occasionally blows up a deep child.
    pub fn desk() -> Self {
        ChildTrainConfig {
            epochs: 10,
            sgd: SgdConfig {
                lr: 0.01,
                ..SgdConfig::default()
            },
            ..Default::default()
        }
    }
}

/// Fraction of `data` classified correctly by `net`.
pub fn evaluate(net: &Network, arch: &MacroArch, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let (xb, labels) = data.batch(idx);
        let mut g = Graph::new();
        let vars = net.register(&mut g, false);
        let x = g.leaf(&xb);
        let logits = network::forward(&mut g, arch, &vars, x, None)?;
        correct += count_correct(g.value(logits), &labels);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains the child from fresh weights on `train` and returns its accuracy
/// on `held_out`.
pub fn train_childnet(
    child: &ChildNet,
    arch: &MacroArch,
    train: &Dataset,
    held_out: &Dataset,
    config: &ChildTrainConfig,
) -> Result<f64> {
    child.validate(arch)?;
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut net = Network::child(arch, &child.choices, &mut stream_rng(config.seed, Stream::Init))?;
    let mut sgd = Sgd::new(config.sgd);
    let mut shuffle = stream_rng(config.seed, Stream::Shuffle);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.sgd.lr, epoch, config.epochs);
        for idx in shuffled_batches(train.len(), config.batch_size, &mut shuffle) {
            let (xb, labels) = train.batch(&idx);
            let mut g = Graph::new();
            let vars = net.register(&mut g, true);
            let x = g.leaf(&xb);
            let logits = network::forward(&mut g, arch, &vars, x, None)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            if !g.scalar_value(loss).is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    phase: "child".to_string(),
                });
            }
            g.backward(loss)?;
            net.zero_grad();
            net.accumulate_grads(&g, &vars)?;
            sgd.step(net.tensors_mut(), lr);
        }
    }
    evaluate(&net, arch, held_out, config.batch_size)
}
