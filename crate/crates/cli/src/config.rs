//! Flat `section.key=value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use hanna_core::childnet::ChildTrainConfig;
use hanna_core::costmodel::DeviceModel;
use hanna_core::data::SyntheticSpec;
use hanna_core::searchspace::ExplicitArch;
use hanna_core::supernet::LossKnobs;
use hanna_core::trainer::SearchConfig;

use crate::Failure;

#[derive(Clone, Debug)]
pub enum ArchChoice {
    Preset(String),
    Explicit(ExplicitArch),
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    /// Raw dataset file; the synthetic generator is used when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Fraction held out for child evaluation.
    pub holdout: f64,
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub layers: usize,
    pub candidates: usize,
    pub seed: u64,
}

/// Knob lists whose Cartesian product forms the sweep grid. An empty list
/// falls back to the search knob value.
#[derive(Clone, Debug, Default)]
pub struct GridConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch: ArchChoice,
    pub data: DataConfig,
    pub device: DeviceModel,
    pub search: SearchConfig,
    pub child: ChildTrainConfig,
    pub lat_table: Option<PathBuf>,
    pub ener_table: Option<PathBuf>,
    pub grid: GridConfig,
    pub oracle: OracleConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchChoice::Preset("desk".to_string()),
            data: DataConfig {
                path: None,
                synthetic: SyntheticSpec {
                    samples: 320,
                    ..SyntheticSpec::default()
                },
                holdout: 0.2,
            },
            device: DeviceModel::default(),
            search: SearchConfig::desk(),
            child: ChildTrainConfig::desk(),
            lat_table: None,
            ener_table: None,
            grid: GridConfig::default(),
            oracle: OracleConfig {
                layers: 3,
                candidates: 3,
                seed: 0,
            },
            out: PathBuf::from("out"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s.trim()))
        .collect()
}

fn boolean(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{value}'")),
    }
}

/// `in:out:stride` triples separated by commas.
fn layers(key: &str, value: &str) -> Result<Vec<(usize, usize, usize)>, String> {
    value
        .split(',')
        .map(|t| {
            let parts: Vec<&str> = t.trim().split(':').collect();
            match parts[..] {
                [i, o, s] => Ok((num(key, i)?, num(key, o)?, num(key, s)?)),
                _ => Err(format!("{key}: expected in:out:stride, got '{t}'")),
            }
        })
        .collect()
}

fn explicit(arch: &mut ArchChoice) -> &mut ExplicitArch {
    if let ArchChoice::Preset(_) = arch {
        *arch = ArchChoice::Explicit(ExplicitArch {
            input_channels: 3,
            input_hw: (8, 8),
            stem_channels: 8,
            stem_stride: 1,
            layers: Vec::new(),
            head_channels: 64,
        });
    }
    match arch {
        ArchChoice::Explicit(e) => e,
        ArchChoice::Preset(_) => unreachable!(),
    }
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let s = &mut self.search;
        match key {
            "arch.preset" => self.arch = ArchChoice::Preset(v.to_string()),
            "arch.layers" => explicit(&mut self.arch).layers = layers(key, v)?,
            "arch.input_channels" => explicit(&mut self.arch).input_channels = num(key, v)?,
            "arch.input_size" => {
                let n = num(key, v)?;
                explicit(&mut self.arch).input_hw = (n, n);
            }
            "arch.stem_channels" => explicit(&mut self.arch).stem_channels = num(key, v)?,
            "arch.stem_stride" => explicit(&mut self.arch).stem_stride = num(key, v)?,
            "arch.head_channels" => explicit(&mut self.arch).head_channels = num(key, v)?,

            "data.path" => self.data.path = Some(PathBuf::from(v)),
            "data.samples" => self.data.synthetic.samples = num(key, v)?,
            "data.classes" => self.data.synthetic.classes = num(key, v)?,
            "data.channels" => self.data.synthetic.channels = num(key, v)?,
            "data.size" => {
                let n = num(key, v)?;
                self.data.synthetic.height = n;
                self.data.synthetic.width = n;
            }
            "data.noise" => self.data.synthetic.noise = num(key, v)?,
            "data.seed" => self.data.synthetic.seed = num(key, v)?,
            "data.holdout" => self.data.holdout = num(key, v)?,

            "device.supply_voltage" => self.device.supply_voltage = num(key, v)?,
            "device.idle_current" => self.device.idle_current = num(key, v)?,
            "device.max_current" => self.device.max_current = num(key, v)?,
            "device.throughput" => self.device.throughput = num(key, v)?,
            "device.per_block_overhead" => self.device.per_block_overhead = num(key, v)?,
            "device.utilization_exponent" => self.device.utilization_exponent = num(key, v)?,

            "search.epochs" => s.epochs = num(key, v)?,
            "search.warmup_epochs" => s.warmup_epochs = num(key, v)?,
            "search.batch_size" => s.batch_size = num(key, v)?,
            "search.split" => s.split = num(key, v)?,
            "search.lr" => s.weight_opt.lr = num(key, v)?,
            "search.momentum" => s.weight_opt.momentum = num(key, v)?,
            "search.weight_decay" => s.weight_opt.weight_decay = num(key, v)?,
            "search.theta_lr" => s.theta_opt.lr = num(key, v)?,
            "search.theta_weight_decay" => s.theta_opt.weight_decay = num(key, v)?,
            "search.tau_init" => s.tau_init = num(key, v)?,
            "search.tau_min" => s.tau_min = num(key, v)?,
            "search.alpha" => s.knobs.alpha = num(key, v)?,
            "search.beta" => s.knobs.beta = num(key, v)?,
            "search.gamma" => s.knobs.gamma = num(key, v)?,
            "search.delta" => s.knobs.delta = num(key, v)?,
            "search.seed" => s.seed = num(key, v)?,
            "search.strict" => s.strict = boolean(key, v)?,

            "child.epochs" => self.child.epochs = num(key, v)?,
            "child.batch_size" => self.child.batch_size = num(key, v)?,
            "child.lr" => self.child.sgd.lr = num(key, v)?,
            "child.momentum" => self.child.sgd.momentum = num(key, v)?,
            "child.weight_decay" => self.child.sgd.weight_decay = num(key, v)?,

            "tables.latency" => self.lat_table = Some(PathBuf::from(v)),
            "tables.energy" => self.ener_table = Some(PathBuf::from(v)),

            "sweep.alpha" => self.grid.alpha = list(key, v)?,
            "sweep.beta" => self.grid.beta = list(key, v)?,
            "sweep.gamma" => self.grid.gamma = list(key, v)?,
            "sweep.delta" => self.grid.delta = list(key, v)?,

            "oracle.layers" => self.oracle.layers = num(key, v)?,
            "oracle.candidates" => self.oracle.candidates = num(key, v)?,
            "oracle.seed" => self.oracle.seed = num(key, v)?,

            "run.out" => self.out = PathBuf::from(v),
            _ => return Err(format!("unknown configuration key '{key}'")),
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected key=value", n + 1))?;
            cfg.set(key.trim(), value)
                .map_err(|e| format!("{origin}:{}: {e}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string()).map_err(Failure::validation)
    }

    /// Cartesian product of the sweep lists in alpha, beta, gamma, delta
    /// nesting order.
    pub fn knob_grid(&self) -> Result<Vec<LossKnobs>, Failure> {
        let k = self.search.knobs;
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let g = &self.grid;
        let mut out = Vec::new();
        for &a in &or(&g.alpha, k.alpha) {
            for &b in &or(&g.beta, k.beta) {
                for &c in &or(&g.gamma, k.gamma) {
                    for &d in &or(&g.delta, k.delta) {
                        out.push(LossKnobs::new(a, b, c, d).map_err(Failure::from)?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Referenced input paths must exist before any work starts.
    pub fn check_paths(&self) -> Result<(), Failure> {
        let paths = [&self.data.path, &self.lat_table, &self.ener_table];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(Failure::validation(format!("{} does not exist", p.display())));
            }
        }
        if !(self.data.holdout > 0.0 && self.data.holdout < 1.0) {
            return Err(Failure::validation(format!(
                "data.holdout {} outside (0, 1)",
                self.data.holdout
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown() {
        let c = RunConfig::parse(
            "# comment\nsearch.epochs=3\nsweep.alpha=0, 0.5\narch.layers=8:8:1,8:16:2\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.search.epochs, 3);
        assert_eq!(c.grid.alpha, vec![0.0, 0.5]);
        match c.arch {
            ArchChoice::Explicit(e) => assert_eq!(e.layers, vec![(8, 8, 1), (8, 16, 2)]),
            ArchChoice::Preset(_) => panic!("expected explicit arch"),
        }
        let err = RunConfig::parse("search.bogus=1\n", "t").unwrap_err();
        assert!(err.contains("unknown configuration key 'search.bogus'"));
        assert!(RunConfig::parse("search.epochs\n", "t").is_err());
        assert!(RunConfig::parse("search.epochs=x\n", "t").is_err());
    }

    #[test]
    fn grid_is_cartesian() {
        let c = RunConfig::parse("sweep.alpha=0,1\nsweep.gamma=0,0.5,1\n", "t").unwrap();
        let g = c.knob_grid().unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!((g[1].alpha, g[1].gamma), (0.0, 0.5));
    }
}
