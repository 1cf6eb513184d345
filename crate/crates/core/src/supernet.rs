//! Gumbel-Softmax relaxed supernet and the three-term search loss.
//!
//! The loss of a sampled architecture is
//! `CE + alpha * LAT^beta + gamma * ENER^delta`, where `LAT` and `ENER` are
//! mask-weighted sums of lookup-table entries. One Gumbel draw per layer is
//! shared by the feature mixture and both cost terms so they describe the
//! same sampled architecture.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{masked_gumbel_softmax, Graph, Tensor, Var};
use crate::costmodel::{parse_count, parse_header, CostTable};
use crate::network::{self, Network, NetworkVars};
use crate::searchspace::{MacroArch, NUM_CANDIDATES};
use crate::{Error, Result};

/// Floor applied to costs before exponentiation.
pub const COST_FLOOR: f64 = 1e-12;

/// Architecture sampling logits, one row per searchable layer. Inadmissible
/// cells hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    rows: usize,
    cols: usize,
    logits: Vec<f64>,
}

impl Theta {
    pub fn new(rows: usize, cols: usize, logits: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || logits.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} logits for a {rows}x{cols} theta",
                logits.len()
            )));
        }
        for (l, row) in logits.chunks(cols).enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::invalid(format!("theta row {l} holds NaN or +inf")));
            }
            if !row.iter().any(|v| v.is_finite()) {
                return Err(Error::invalid(format!("theta row {l} has no admissible cell")));
            }
        }
        Ok(Theta { rows, cols, logits })
    }

    /// Constant `value` on every admissible cell of `arch`, `-inf` elsewhere.
    pub fn constant(arch: &MacroArch, value: f64) -> Self {
        let logits = arch
            .admissible()
            .iter()
            .flat_map(|r| r.map(|ok| if ok { value } else { f64::NEG_INFINITY }))
            .collect();
        Theta {
            rows: arch.num_tbs(),
            cols: NUM_CANDIDATES,
            logits,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.logits[l * self.cols..][..self.cols]
    }

    pub fn row_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.logits[l * self.cols..][..self.cols]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn is_admissible(&self, l: usize, c: usize) -> bool {
        self.row(l)[c].is_finite()
    }

    /// Plain softmax of every row (no noise, unit temperature).
    pub fn probabilities(&self) -> Vec<f64> {
        let zeros = vec![0.0; self.cols];
        (0..self.rows)
            .flat_map(|l| masked_gumbel_softmax(self.row(l), &zeros, 1.0).expect("validated row"))
            .collect()
    }

    pub fn check_matches(&self, arch: &MacroArch) -> Result<()> {
        if self.rows != arch.num_tbs() || self.cols != NUM_CANDIDATES {
            return Err(Error::shape(format!(
                "theta is {}x{}, architecture '{}' needs {}x{}",
                self.rows,
                self.cols,
                arch.name,
                arch.num_tbs(),
                NUM_CANDIDATES
            )));
        }
        for (l, adm) in arch.admissible().iter().enumerate() {
            for (c, &ok) in adm.iter().enumerate() {
                if self.is_admissible(l, c) != ok {
                    return Err(Error::shape(format!(
                        "theta cell ({l}, {c}) admissibility disagrees with the architecture"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Graph leaf holding the logits as an `[L, K]` matrix.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> Var {
        let t = Tensor::new(&[self.rows, self.cols], self.logits.clone()).expect("consistent");
        graph.leaf(&if trainable { t.with_grad() } else { t })
    }

    pub fn to_text(&self, epoch: usize, tau: f64) -> String {
        let mut out = format!(
            "# layers={} blocks={} epoch={epoch} tau={tau}\n",
            self.rows, self.cols
        );
        for l in 0..self.rows {
            let cells: Vec<String> = self.row(l).iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses a snapshot, returning `(theta, epoch, tau)`.
    pub fn parse(text: &str, origin: &str) -> Result<(Self, usize, f64)> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(origin, 1, "empty file"))?;
        let f = parse_header(header, origin, &["layers", "blocks", "epoch", "tau"])?;
        let rows = parse_count(&f[0], origin, "layers")?;
        let cols = parse_count(&f[1], origin, "blocks")?;
        let epoch: usize = f[2]
            .parse()
            .map_err(|_| Error::format(origin, 1, format!("bad epoch '{}'", f[2])))?;
        let tau: f64 = f[3]
            .parse()
            .ok()
            .filter(|t: &f64| *t > 0.0)
            .ok_or_else(|| Error::format(origin, 1, format!("bad tau '{}'", f[3])))?;
        let mut logits = Vec::with_capacity(rows * cols);
        let mut seen = 0;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split_whitespace().collect();
            if cells.len() != cols {
                return Err(Error::format(
                    origin,
                    lineno,
                    format!("row {seen} has {} columns, expected {cols}", cells.len()),
                ));
            }
            for c in cells {
                let v: f64 = c
                    .parse()
                    .map_err(|_| Error::format(origin, lineno, format!("'{c}' is not a number")))?;
                if v.is_nan() || v == f64::INFINITY {
                    return Err(Error::format(origin, lineno, format!("invalid logit '{c}'")));
                }
                logits.push(v);
            }
            seen += 1;
        }
        if seen != rows {
            return Err(Error::format(
                origin,
                seen + 2,
                format!("header declares {rows} rows, found {seen}"),
            ));
        }
        let theta = Theta::new(rows, cols, logits).map_err(|e| Error::format(origin, 0, e.to_string()))?;
        Ok((theta, epoch, tau))
    }

    pub fn save(&self, path: &Path, epoch: usize, tau: f64) -> Result<()> {
        fs::write(path, self.to_text(epoch, tau))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, usize, f64)> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Relaxed architecture sample: mask rows sum to one over admissible cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelMask {
    pub rows: usize,
    pub cols: usize,
    pub m: Vec<f64>,
    pub tau: f64,
    pub noise: Vec<f64>,
}

impl GumbelMask {
    pub fn new(theta: &Theta, noise: Vec<f64>, tau: f64) -> Result<Self> {
        if noise.len() != theta.logits.len() {
            return Err(Error::shape(format!(
                "{} noise values for {} logits",
                noise.len(),
                theta.logits.len()
            )));
        }
        let mut m = Vec::with_capacity(noise.len());
        for l in 0..theta.rows {
            m.extend(gumbel_softmax(
                theta.row(l),
                &noise[l * theta.cols..][..theta.cols],
                tau,
            )?);
        }
        Ok(GumbelMask {
            rows: theta.rows,
            cols: theta.cols,
            m,
            tau,
            noise,
        })
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.m[l * self.cols..][..self.cols]
    }

    /// Column with the largest weight in each row (lowest index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows).map(|l| argmax_low(self.row(l))).collect()
    }
}

/// Index of the largest finite value; ties go to the lowest index.
pub fn argmax_low(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Penalty weights of the latency and energy terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossKnobs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossKnobs {
    fn default() -> Self {
        LossKnobs {
            alpha: 0.2,
            beta: 1.0,
            gamma: 0.0,
            delta: 1.0,
        }
    }
}

impl LossKnobs {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        let k = LossKnobs {
            alpha,
            beta,
            gamma,
            delta,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("knobs must be finite"));
        }
        if self.alpha < 0.0 || self.gamma < 0.0 || self.beta <= 0.0 || self.delta <= 0.0 {
            return Err(Error::invalid(format!(
                "need alpha >= 0, beta > 0, gamma >= 0, delta > 0; got {all:?}"
            )));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lat: f64,
    pub ener: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compute(ce: f64, lat: f64, ener: f64, knobs: &LossKnobs) -> Result<Self> {
        if !(ce.is_finite() && lat.is_finite() && ener.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite loss inputs ce={ce} lat={lat} ener={ener}"
            )));
        }
        let total = ce
            + knobs.alpha * lat.max(COST_FLOOR).powf(knobs.beta)
            + knobs.gamma * ener.max(COST_FLOOR).powf(knobs.delta);
        Ok(LossBreakdown {
            ce,
            lat,
            ener,
            total,
        })
    }
}

/// I.i.d. Gumbel(0, 1) draws `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn sample_gumbel<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| gumbel_from_uniform(rng.gen::<f64>()))
        .collect()
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// One relaxed mask row: softmax of `(theta + noise) / tau` over the
/// admissible (finite) cells.
pub fn gumbel_softmax(theta_row: &[f64], noise_row: &[f64], tau: f64) -> Result<Vec<f64>> {
    masked_gumbel_softmax(theta_row, noise_row, tau)
}

/// `sum_l sum_i m_li * cost_li` on the graph.
pub fn expected_cost(graph: &mut Graph, mask: Var, table: &CostTable) -> Result<Var> {
    let shape = graph.shape(mask);
    if shape != [table.num_layers(), table.num_blocks()] {
        return Err(Error::shape(format!(
            "mask {:?} against {} table {}x{}",
            shape,
            table.metric,
            table.num_layers(),
            table.num_blocks()
        )));
    }
    let m = graph.value(mask);
    for (i, (&w, cell)) in m.iter().zip(table.rows().iter().flatten()).enumerate() {
        if cell.is_none() && w != 0.0 {
            return Err(Error::shape(format!(
                "mask puts weight {w} on absent {} cell ({}, {})",
                table.metric,
                i / table.num_blocks(),
                i % table.num_blocks()
            )));
        }
    }
    graph.dot_const(mask, &table.dense())
}

/// Plain-value expected cost of a mask.
pub fn expected_cost_value(mask: &[f64], table: &CostTable) -> Result<f64> {
    if mask.len() != table.num_layers() * table.num_blocks() {
        return Err(Error::shape(format!(
            "{} mask values for a {}x{} table",
            mask.len(),
            table.num_layers(),
            table.num_blocks()
        )));
    }
    let mut g = Graph::new();
    let v = g.constant(&[table.num_layers(), table.num_blocks()], mask.to_vec())?;
    let e = expected_cost(&mut g, v, table)?;
    Ok(g.scalar_value(e))
}

/// `ce + alpha * lat^beta + gamma * ener^delta` on the graph. Costs are
/// floored at [`COST_FLOOR`] before exponentiation.
pub fn total_loss(
    graph: &mut Graph,
    ce: Var,
    lat: Var,
    ener: Var,
    knobs: &LossKnobs,
) -> Result<(Var, LossBreakdown)> {
    knobs.validate()?;
    let breakdown = LossBreakdown::compute(
        graph.scalar_value(ce),
        graph.scalar_value(lat),
        graph.scalar_value(ener),
        knobs,
    )?;
    let lp = graph.pow_floor(lat, knobs.beta, COST_FLOOR);
    let lt = graph.scale(lp, knobs.alpha);
    let ep = graph.pow_floor(ener, knobs.delta, COST_FLOOR);
    let et = graph.scale(ep, knobs.gamma);
    let s = graph.add(ce, lt)?;
    let total = graph.add(s, et)?;
    Ok((total, breakdown))
}

/// Outputs of one supernet pass.
#[derive(Clone, Copy, Debug)]
pub struct SupernetOutput {
    pub logits: Var,
    pub mask: Var,
    pub lat: Var,
    pub ener: Var,
}

/// Stem, mask-mixed searchable layers and head, plus the expected latency
/// and energy under the same mask.
#[allow(clippy::too_many_arguments)]
pub fn supernet_forward(
    graph: &mut Graph,
    arch: &MacroArch,
    weights: &NetworkVars,
    x: Var,
    theta: Var,
    noise: &[f64],
    tau: f64,
    tables: (&CostTable, &CostTable),
) -> Result<SupernetOutput> {
    let mask = graph.gumbel_softmax(theta, noise, tau)?;
    let logits = network::forward(graph, arch, weights, x, Some(mask))?;
    let lat = expected_cost(graph, mask, tables.0)?;
    let ener = expected_cost(graph, mask, tables.1)?;
    Ok(SupernetOutput {
        logits,
        mask,
        lat,
        ener,
    })
}

/// Convenience bundle tying weights and theta to an architecture.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub arch: MacroArch,
    pub weights: Network,
    pub theta: Theta,
}

impl Supernet {
    pub fn new<R: Rng>(arch: MacroArch, rng: &mut R) -> Result<Self> {
        let weights = Network::supernet(&arch, rng)?;
        let theta = Theta::constant(&arch, 1.0);
        Ok(Supernet {
            arch,
            weights,
            theta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_fixed_point() {
        let u = (-1.0f64).exp();
        assert!(gumbel_from_uniform(u).abs() < 1e-15);
    }

    #[test]
    fn equal_logits_zero_noise_is_uniform() {
        for tau in [0.1, 1.0, 7.0] {
            let m = gumbel_softmax(&[0.3; 4], &[0.0; 4], tau).unwrap();
            assert!(m.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn small_temperature_is_one_hot() {
        let m = gumbel_softmax(&[0.1, 0.5, 0.2], &[0.2, -0.1, 0.0], 1e-6).unwrap();
        assert!((m[1] - 1.0).abs() < 1e-9 && m[0] < 1e-9 && m[2] < 1e-9);
    }

    #[test]
    fn inadmissible_cells_are_exact_zero() {
        let m = gumbel_softmax(&[1.0, f64::NEG_INFINITY, 1.0], &[0.0; 3], 1.0).unwrap();
        assert_eq!(m[1], 0.0);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gumbel_softmax(&[f64::NEG_INFINITY; 2], &[0.0; 2], 1.0).is_err());
        assert!(gumbel_softmax(&[0.0; 2], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn loss_examples() {
        let off = LossKnobs::new(0.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(LossBreakdown::compute(1.25, 3.0, 2.0, &off).unwrap().total, 1.25);
        let k = LossKnobs::new(0.5, 1.5, 0.0, 1.0).unwrap();
        let b = LossBreakdown::compute(0.0, 3.5, 1.0, &k).unwrap();
        assert!((b.total - 3.273_950_42).abs() < 1e-6);
        assert!(LossBreakdown::compute(f64::NAN, 1.0, 1.0, &k).is_err());
        assert!(LossKnobs::new(-1.0, 1.0, 0.0, 1.0).is_err());
        assert!(LossKnobs::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn theta_text_round_trip() {
        let t = Theta::new(2, 3, vec![1.0, f64::NEG_INFINITY, 0.1, -2.5, 3.0, 1e-17]).unwrap();
        let text = t.to_text(4, 2.55);
        let (back, epoch, tau) = Theta::parse(&text, "t").unwrap();
        assert_eq!((back.clone(), epoch, tau), (t, 4, 2.55));
        assert_eq!(back.to_text(4, 2.55), text);
        assert!(text.contains("-inf"));
    }
}
