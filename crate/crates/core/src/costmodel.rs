//! Per-block latency and energy lookup tables.
//!
//! Tables come either from a file or from [`profile`], which evaluates an
//! analytic device model: latency is a fixed per-block overhead plus
//! MACs over throughput, and the dynamic current rises from the idle draw
//! toward the peak with the block's share of the heaviest block's MACs.
//! Energy counts only the current above idle.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::conv_output_len;
use crate::searchspace::{BlockConfig, LayerSpec, MacroArch, CANDIDATES, NUM_CANDIDATES};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceModel {
    /// Volts.
    pub supply_voltage: f64,
    /// Amps drawn with nothing running.
    pub idle_current: f64,
    /// Amps drawn by the heaviest block.
    pub max_current: f64,
    /// Multiply-accumulates per second.
    pub throughput: f64,
    /// Seconds charged to every block, skip included.
    pub per_block_overhead: f64,
    pub utilization_exponent: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        DeviceModel {
            supply_voltage: 5.1,
            idle_current: 0.24,
            max_current: 0.74,
            throughput: 1e8,
            per_block_overhead: 1e-4,
            utilization_exponent: 0.5,
        }
    }
}

impl DeviceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.idle_current > 0.0 && self.idle_current < self.max_current) {
            return Err(Error::invalid(format!(
                "need 0 < idle current ({}) < max current ({})",
                self.idle_current, self.max_current
            )));
        }
        if !(self.throughput > 0.0) {
            return Err(Error::invalid("throughput must be positive"));
        }
        if !(self.supply_voltage > 0.0) || !(self.per_block_overhead >= 0.0) {
            return Err(Error::invalid("voltage must be positive and overhead non-negative"));
        }
        if !(self.utilization_exponent > 0.0) {
            return Err(Error::invalid("utilization exponent must be positive"));
        }
        Ok(())
    }
}

/// Multiply-accumulate count of one candidate applied to an `input_hw` map.
pub fn block_macs(cfg: &BlockConfig, layer: &LayerSpec, input_hw: (usize, usize)) -> Result<u64> {
    if cfg.is_skip {
        if !layer.skip_admissible() {
            return Err(Error::invalid(format!(
                "skip is inadmissible for layer {}->{} stride {}",
                layer.in_channels, layer.out_channels, layer.stride
            )));
        }
        return Ok(0);
    }
    let hidden = cfg.expansion * layer.in_channels;
    if layer.in_channels % cfg.groups != 0
        || hidden % cfg.groups != 0
        || layer.out_channels % cfg.groups != 0
    {
        return Err(Error::invalid(format!(
            "channels not divisible by groups {}",
            cfg.groups
        )));
    }
    let (h, w) = input_hw;
    let pad = cfg.kernel / 2;
    let oh = conv_output_len(h, cfg.kernel, layer.stride, pad)
        .ok_or_else(|| Error::invalid("input too small for kernel"))?;
    let ow = conv_output_len(w, cfg.kernel, layer.stride, pad)
        .ok_or_else(|| Error::invalid("input too small for kernel"))?;
    let expand = h * w * layer.in_channels * hidden / cfg.groups;
    let depthwise = oh * ow * hidden * cfg.kernel * cfg.kernel;
    let project = oh * ow * hidden * layer.out_channels / cfg.groups;
    Ok((expand + depthwise + project) as u64)
}

/// Seconds for a block of `macs` multiply-accumulates.
pub fn block_latency(model: &DeviceModel, macs: u64) -> f64 {
    model.per_block_overhead + macs as f64 / model.throughput
}

/// Joules above idle for a block running `seconds`, with `max_macs` the
/// heaviest block of the table.
pub fn block_energy(model: &DeviceModel, macs: u64, max_macs: u64, seconds: f64) -> f64 {
    let u = if max_macs == 0 {
        0.0
    } else {
        (macs as f64 / max_macs as f64)
            .min(1.0)
            .powf(model.utilization_exponent)
    };
    let current = model.idle_current + (model.max_current - model.idle_current) * u;
    (current - model.idle_current) * model.supply_voltage * seconds
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Latency,
    Energy,
}

impl Metric {
    pub fn unit(self) -> &'static str {
        match self {
            Metric::Latency => "s",
            Metric::Energy => "J",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Latency => "latency",
            Metric::Energy => "energy",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency" => Ok(Metric::Latency),
            "energy" => Ok(Metric::Energy),
            other => Err(Error::invalid(format!("unknown metric '{other}'"))),
        }
    }
}

/// `[layers x blocks]` cost matrix; `None` marks an absent (inadmissible) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub metric: Metric,
    rows: Vec<Vec<Option<f64>>>,
}

impl CostTable {
    pub fn new(metric: Metric, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 {
            return Err(Error::shape("cost table needs at least one column"));
        }
        for (l, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::shape(format!(
                    "row {l} has {} columns, expected {width}",
                    row.len()
                )));
            }
            for v in row.iter().flatten() {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::invalid(format!("row {l} holds invalid cost {v}")));
                }
            }
            if row.iter().all(Option::is_none) {
                return Err(Error::invalid(format!("row {l} has no admissible cell")));
            }
        }
        Ok(CostTable { metric, rows })
    }

    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.rows[0].len()
    }

    pub fn get(&self, layer: usize, block: usize) -> Option<f64> {
        self.rows.get(layer)?.get(block).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    /// Row-major values with absent cells as zero.
    pub fn dense(&self) -> Vec<f64> {
        self.rows
            .iter()
            .flat_map(|r| r.iter().map(|v| v.unwrap_or(0.0)))
            .collect()
    }

    pub fn row_min(&self, layer: usize) -> f64 {
        self.rows[layer]
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Rows must line up with `arch`'s layers and absent cells must be
    /// exactly the inadmissible ones.
    pub fn check_matches(&self, arch: &MacroArch) -> Result<()> {
        if self.num_layers() != arch.num_tbs() || self.num_blocks() != NUM_CANDIDATES {
            return Err(Error::shape(format!(
                "{} table is {}x{}, architecture needs {}x{}",
                self.metric,
                self.num_layers(),
                self.num_blocks(),
                arch.num_tbs(),
                NUM_CANDIDATES
            )));
        }
        for (l, (row, adm)) in self.rows.iter().zip(arch.admissible()).enumerate() {
            for (b, (cell, ok)) in row.iter().zip(adm).enumerate() {
                if cell.is_some() != ok {
                    return Err(Error::shape(format!(
                        "{} table cell ({l}, {b}) is {} but the block is {}",
                        self.metric,
                        if cell.is_some() { "present" } else { "absent" },
                        if ok { "admissible" } else { "inadmissible" }
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# metric={} unit={} layers={} blocks={}\n",
            self.metric,
            self.metric.unit(),
            self.num_layers(),
            self.num_blocks()
        );
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x}")))
                .collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(origin, 1, "empty file"))?;
        let fields = parse_header(header, origin, &["metric", "unit", "layers", "blocks"])?;
        let metric: Metric = fields[0]
            .parse()
            .map_err(|_| Error::format(origin, 1, format!("unknown metric '{}'", fields[0])))?;
        if fields[1] != metric.unit() {
            return Err(Error::format(
                origin,
                1,
                format!("unit '{}' does not match metric {metric}", fields[1]),
            ));
        }
        let layers = parse_count(&fields[2], origin, "layers")?;
        let blocks = parse_count(&fields[3], origin, "blocks")?;
        let mut rows = Vec::with_capacity(layers);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split_whitespace().collect();
            if cells.len() != blocks {
                return Err(Error::format(
                    origin,
                    lineno,
                    format!(
                        "row {} has {} columns, expected {blocks}",
                        rows.len(),
                        cells.len()
                    ),
                ));
            }
            let mut row = Vec::with_capacity(blocks);
            for c in cells {
                if c == "-" {
                    row.push(None);
                    continue;
                }
                let v: f64 = c
                    .parse()
                    .map_err(|_| Error::format(origin, lineno, format!("'{c}' is not a number")))?;
                if v.is_nan() || v.is_infinite() {
                    return Err(Error::format(origin, lineno, format!("non-finite value '{c}'")));
                }
                if v < 0.0 {
                    return Err(Error::format(origin, lineno, format!("negative value {v}")));
                }
                row.push(Some(v));
            }
            rows.push(row);
        }
        if rows.len() != layers {
            return Err(Error::format(
                origin,
                rows.len() + 2,
                format!("header declares {layers} rows, found {}", rows.len()),
            ));
        }
        CostTable::new(metric, rows).map_err(|e| Error::format(origin, 0, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Parses `# k1=v1 k2=v2 ...` requiring exactly the given keys in order.
pub(crate) fn parse_header(line: &str, origin: &str, keys: &[&str]) -> Result<Vec<String>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::format(origin, 1, "header must start with '#'"))?;
    let parts: Vec<&str> = body.split_whitespace().collect();
    if parts.len() != keys.len() {
        return Err(Error::format(
            origin,
            1,
            format!("header needs fields {keys:?}, found {parts:?}"),
        ));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(p, k)| match p.split_once('=') {
            Some((key, v)) if key == *k => Ok(v.to_string()),
            _ => Err(Error::format(origin, 1, format!("expected '{k}=...', found '{p}'"))),
        })
        .collect()
}

pub(crate) fn parse_count(v: &str, origin: &str, what: &str) -> Result<usize> {
    v.parse()
        .ok()
        .filter(|&n: &usize| n > 0)
        .ok_or_else(|| Error::format(origin, 1, format!("{what} must be a positive integer, got '{v}'")))
}

/// Latency and energy tables for every admissible cell of `arch`.
pub fn profile(model: &DeviceModel, arch: &MacroArch) -> Result<(CostTable, CostTable)> {
    model.validate()?;
    let mut macs: Vec<Vec<Option<u64>>> = Vec::with_capacity(arch.num_tbs());
    for (layer, hw) in arch.tbs_layers.iter().zip(arch.layer_input_hw()) {
        let row = CANDIDATES
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                if layer.admits(i) {
                    block_macs(cfg, layer, hw).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        macs.push(row);
    }
    let max_macs = macs.iter().flatten().flatten().copied().max().unwrap_or(0);
    let lat: Vec<Vec<Option<f64>>> = macs
        .iter()
        .map(|r| r.iter().map(|m| m.map(|m| block_latency(model, m))).collect())
        .collect();
    let ener: Vec<Vec<Option<f64>>> = macs
        .iter()
        .zip(&lat)
        .map(|(mr, lr)| {
            mr.iter()
                .zip(lr)
                .map(|(m, t)| Some(block_energy(model, (*m)?, max_macs, (*t)?)))
                .collect()
        })
        .collect();
    Ok((
        CostTable::new(Metric::Latency, lat)?,
        CostTable::new(Metric::Energy, ener)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{build_macro, ArchSource, SKIP_INDEX};

    #[test]
    fn mac_count_hand_example() {
        let layer = LayerSpec::tbs(4, 4, 1);
        let cfg = CANDIDATES[0];
        assert_eq!(block_macs(&cfg, &layer, (4, 4)).unwrap(), 1088);
        assert_eq!(block_macs(&BlockConfig::SKIP, &layer, (4, 4)).unwrap(), 0);
        assert_eq!(block_macs(&cfg, &layer, (8, 8)).unwrap(), 4 * 1088);
        assert!(block_macs(&BlockConfig::SKIP, &LayerSpec::tbs(4, 4, 2), (4, 4)).is_err());
    }

    #[test]
    fn latency_and_energy_examples() {
        let m = DeviceModel::default();
        assert_eq!(block_latency(&m, 0), 1e-4);
        assert!((block_latency(&m, 100_000_000) - 1.0001).abs() < 1e-15);
        assert!((block_energy(&m, 10, 10, 0.1) - 0.255).abs() < 1e-12);
        assert_eq!(block_energy(&m, 0, 10, 0.1), 0.0);
    }

    #[test]
    fn device_validation() {
        let bad = DeviceModel {
            idle_current: 0.8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(DeviceModel::default().validate().is_ok());
    }

    #[test]
    fn desk_tables_have_absent_skips_and_row_minimum_skips() {
        let arch = build_macro(ArchSource::Preset("desk"), 4).unwrap();
        let (lat, ener) = profile(&DeviceModel::default(), &arch).unwrap();
        assert_eq!((lat.num_layers(), lat.num_blocks()), (6, 9));
        lat.check_matches(&arch).unwrap();
        ener.check_matches(&arch).unwrap();
        for (l, layer) in arch.tbs_layers.iter().enumerate() {
            match lat.get(l, SKIP_INDEX) {
                Some(t) => {
                    assert!(layer.skip_admissible());
                    assert_eq!(t, lat.row_min(l));
                    assert_eq!(ener.get(l, SKIP_INDEX).unwrap(), ener.row_min(l));
                }
                None => assert!(!layer.skip_admissible()),
            }
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = "# metric=latency unit=s layers=2 blocks=9\n1 2 3 4 5 6 7 8 9\n1 2 3 4 5 6 7 8\n";
        let err = CostTable::parse(text, "t.txt").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("row 1"), "{err}");
        let neg = "# metric=latency unit=s layers=1 blocks=9\n1 2 3 -4 5 6 7 8 9\n";
        assert!(CostTable::parse(neg, "t").unwrap_err().to_string().contains("line 2"));
        let nan = "# metric=latency unit=s layers=1 blocks=9\n1 2 3 NaN 5 6 7 8 9\n";
        assert!(CostTable::parse(nan, "t").is_err());
        let bad_header = "# metric=latency layers=1 blocks=9\n1 2 3 4 5 6 7 8 9\n";
        assert!(CostTable::parse(bad_header, "t").unwrap_err().to_string().contains("line 1"));
        let wrong_unit = "# metric=energy unit=s layers=1 blocks=9\n1 2 3 4 5 6 7 8 9\n";
        assert!(CostTable::parse(wrong_unit, "t").is_err());
    }

    #[test]
    fn hand_written_table_loads() {
        let text = "# metric=energy unit=J layers=1 blocks=9\n1 2 3 4 5 6 7 8 9\n";
        let t = CostTable::parse(text, "t").unwrap();
        let expect: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(t.dense(), expect);
        assert_eq!(t.metric, Metric::Energy);
    }
}
