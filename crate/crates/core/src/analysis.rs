//! Knob pre-visualisation, dominance labels, Pareto fronts and knob sweeps.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::childnet::{childnet_cost, sample_childnet, train_childnet, ChildNet, ChildTrainConfig};
use crate::costmodel::CostTable;
use crate::data::Dataset;
use crate::searchspace::MacroArch;
use crate::supernet::{expected_cost_value, LossKnobs};
use crate::trainer::{run_search, theta_init, SearchConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dominance {
    Energy,
    Latency,
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dominance::Energy => "energy-dominant",
            Dominance::Latency => "latency-dominant",
        })
    }
}

impl FromStr for Dominance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy-dominant" => Ok(Dominance::Energy),
            "latency-dominant" => Ok(Dominance::Latency),
            other => Err(Error::invalid(format!("unknown dominance label '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DominanceLabel {
    pub label: Dominance,
    /// `vener / vlat`.
    pub ratio: f64,
}

/// `(alpha * lat0^beta, gamma * ener0^delta)`.
pub fn v_metrics(knobs: &LossKnobs, lat0: f64, ener0: f64) -> Result<(f64, f64)> {
    if !(lat0 > 0.0 && ener0 > 0.0) {
        return Err(Error::invalid(format!(
            "baseline latency ({lat0}) and energy ({ener0}) must be positive"
        )));
    }
    Ok((
        knobs.alpha * lat0.powf(knobs.beta),
        knobs.gamma * ener0.powf(knobs.delta),
    ))
}

/// Energy-dominant iff `vener / vlat > 1`.
pub fn dominance(vlat: f64, vener: f64) -> DominanceLabel {
    let ratio = vener / vlat;
    DominanceLabel {
        label: if ratio > 1.0 {
            Dominance::Energy
        } else {
            Dominance::Latency
        },
        ratio,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelRecord {
    pub model_id: usize,
    pub knobs: LossKnobs,
    pub accuracy: f64,
    pub latency: f64,
    pub energy: f64,
    pub vlat: f64,
    pub vener: f64,
    pub choices: Vec<usize>,
}

impl ModelRecord {
    /// Higher-or-equal accuracy, lower-or-equal costs, one strictly better.
    pub fn dominates(&self, other: &ModelRecord) -> bool {
        let weakly = self.accuracy >= other.accuracy
            && self.latency <= other.latency
            && self.energy <= other.energy;
        let strictly = self.accuracy > other.accuracy
            || self.latency < other.latency
            || self.energy < other.energy;
        weakly && strictly
    }

    pub fn dominance(&self) -> DominanceLabel {
        dominance(self.vlat, self.vener)
    }
}

/// Non-dominated records in input order.
///
/// Records are visited in lexicographic (accuracy desc, latency asc, energy
/// asc) order; any dominator of a record sorts strictly before it, so each
/// record only needs checking against the front collected so far.
pub fn pareto_front(records: &[ModelRecord]) -> Vec<ModelRecord> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        rb.accuracy
            .total_cmp(&ra.accuracy)
            .then(ra.latency.total_cmp(&rb.latency))
            .then(ra.energy.total_cmp(&rb.energy))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| records[f].dominates(&records[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front.into_iter().map(|i| records[i].clone()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    model_id: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
    vlat: f64,
    vener: f64,
    dominance: String,
    accuracy: f64,
    latency_s: f64,
    energy_j: f64,
    child_choices: String,
}

impl From<&ModelRecord> for CsvRow {
    fn from(r: &ModelRecord) -> Self {
        CsvRow {
            model_id: r.model_id,
            alpha: r.knobs.alpha,
            beta: r.knobs.beta,
            gamma: r.knobs.gamma,
            delta: r.knobs.delta,
            vlat: r.vlat,
            vener: r.vener,
            dominance: r.dominance().label.to_string(),
            accuracy: r.accuracy,
            latency_s: r.latency,
            energy_j: r.energy,
            child_choices: r
                .choices
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

impl TryFrom<CsvRow> for ModelRecord {
    type Error = Error;

    fn try_from(r: CsvRow) -> Result<Self> {
        let choices = r
            .child_choices
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::invalid(format!("bad child choice '{s}'")))
            })
            .collect::<Result<_>>()?;
        r.dominance.parse::<Dominance>()?;
        Ok(ModelRecord {
            model_id: r.model_id,
            knobs: LossKnobs {
                alpha: r.alpha,
                beta: r.beta,
                gamma: r.gamma,
                delta: r.delta,
            },
            accuracy: r.accuracy,
            latency: r.latency_s,
            energy: r.energy_j,
            vlat: r.vlat,
            vener: r.vener,
            choices,
        })
    }
}

/// Incremental writer for the sweep CSV schema.
pub struct RecordWriter {
    inner: csv::Writer<File>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(RecordWriter {
            inner: csv::Writer::from_path(path)?,
        })
    }

    pub fn write(&mut self, record: &ModelRecord) -> Result<()> {
        self.inner.serialize(CsvRow::from(record))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_records(path: &Path, records: &[ModelRecord]) -> Result<()> {
    let mut w = RecordWriter::create(path)?;
    if records.is_empty() {
        // Header only.
        w.inner.write_record([
            "model_id", "alpha", "beta", "gamma", "delta", "vlat", "vener", "dominance",
            "accuracy", "latency_s", "energy_j", "child_choices",
        ])?;
        w.inner.flush()?;
    }
    records.iter().try_for_each(|r| w.write(r))
}

pub fn read_records(path: &Path) -> Result<Vec<ModelRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<CsvRow>()
        .map(|row| ModelRecord::try_from(row?))
        .collect()
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Shared inputs of every sweep point.
pub struct SweepSetup<'a> {
    pub base: &'a SearchConfig,
    pub arch: &'a MacroArch,
    pub tables: (&'a CostTable, &'a CostTable),
    /// Data for the supernet search.
    pub search_data: &'a Dataset,
    /// Child retraining data and held-out evaluation data.
    pub child_train: &'a Dataset,
    pub child_test: &'a Dataset,
    pub child: &'a ChildTrainConfig,
}

/// Expected latency and energy under the initial (uniform) theta.
pub fn initial_costs(arch: &MacroArch, tables: (&CostTable, &CostTable)) -> Result<(f64, f64)> {
    let p = theta_init(arch).probabilities();
    Ok((
        expected_cost_value(&p, tables.0)?,
        expected_cost_value(&p, tables.1)?,
    ))
}

fn sweep_point(setup: &SweepSetup<'_>, id: usize, knobs: LossKnobs, base: (f64, f64)) -> Result<ModelRecord> {
    let config = SearchConfig {
        knobs,
        seed: setup.base.seed + id as u64,
        log_dir: setup.base.log_dir.as_ref().map(|d| d.join(format!("model_{id}"))),
        ..setup.base.clone()
    };
    let result = run_search(&config, setup.arch, setup.tables, setup.search_data)?;
    let child: ChildNet = sample_childnet(&result.theta, setup.arch)?;
    let (latency, energy) = childnet_cost(&child, setup.tables.0, setup.tables.1)?;
    let child_cfg = ChildTrainConfig {
        seed: config.seed,
        ..setup.child.clone()
    };
    let accuracy = train_childnet(&child, setup.arch, setup.child_train, setup.child_test, &child_cfg)?;
    let (vlat, vener) = v_metrics(&knobs, base.0, base.1)?;
    Ok(ModelRecord {
        model_id: id,
        knobs,
        accuracy,
        latency,
        energy,
        vlat,
        vener,
        choices: child.choices,
    })
}

/// Search, extract, cost and retrain one child per knob setting. Point `i`
/// uses seed `base.seed + i`. Rows are appended to `csv_path` as they
/// finish; failed points are logged and skipped.
pub fn sweep(
    grid: &[LossKnobs],
    setup: &SweepSetup<'_>,
    csv_path: Option<&Path>,
) -> Result<Vec<ModelRecord>> {
    if grid.is_empty() {
        return Err(Error::invalid("knob grid is empty"));
    }
    let base = initial_costs(setup.arch, setup.tables)?;
    let mut writer = csv_path.map(RecordWriter::create).transpose()?;
    let mut out = Vec::with_capacity(grid.len());
    for (id, knobs) in grid.iter().enumerate() {
        match sweep_point(setup, id, *knobs, base) {
            Ok(rec) => {
                if let Some(w) = writer.as_mut() {
                    w.write(&rec)?;
                }
                out.push(rec);
            }
            Err(e) => log::warn!("sweep point {id} ({knobs:?}) failed: {e}"),
        }
    }
    Ok(out)
}
