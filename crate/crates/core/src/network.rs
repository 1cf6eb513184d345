//! Weights and forward pass shared by the supernet and child networks.
//!
//! A [`Network`] holds, for every searchable layer, the candidates it can
//! execute: all admissible columns for a supernet, exactly one for a child.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::searchspace::{block_forward, BlockParams, BlockVars, MacroArch, CANDIDATES};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub column: usize,
    /// `None` for the skip column.
    pub params: Option<BlockParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub layers: Vec<Vec<Candidate>>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

/// He-uniform for convolutions feeding a ReLU.
const CONV_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

/// Uniform in `[-gain/sqrt(fan_in), gain/sqrt(fan_in)]`.
fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, len: usize, gain: f64) -> Vec<f64> {
    let bound = gain / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl Network {
    fn with_layers<R: Rng>(
        arch: &MacroArch,
        columns: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<Self> {
        let stem = &arch.stem;
        let stem_fan = stem.in_channels * 9;
        let stem_w = Tensor::new(
            &[stem.out_channels, stem.in_channels, 3, 3],
            fan_in_uniform(rng, stem_fan, stem.out_channels * stem_fan, CONV_GAIN),
        )?
        .with_grad();
        let stem_b = Tensor::zeros(&[stem.out_channels]).with_grad();
        let mut layers = Vec::with_capacity(arch.num_tbs());
        for (layer, cols) in arch.tbs_layers.iter().zip(columns) {
            let mut cands = Vec::with_capacity(cols.len());
            for &column in cols {
                if !layer.admits(column) {
                    return Err(Error::invalid(format!(
                        "column {column} is inadmissible for layer {}->{} stride {}",
                        layer.in_channels, layer.out_channels, layer.stride
                    )));
                }
                let cfg = &CANDIDATES[column];
                let params = if cfg.is_skip {
                    None
                } else {
                    Some(BlockParams::new(cfg, layer, |fan, len| {
                        fan_in_uniform(rng, fan, len, CONV_GAIN)
                    })?)
                };
                cands.push(Candidate { column, params });
            }
            layers.push(cands);
        }
        let last = arch
            .tbs_layers
            .last()
            .map_or(stem.out_channels, |l| l.out_channels);
        let head_w = Tensor::new(
            &[arch.head_channels, last, 1, 1],
            fan_in_uniform(rng, last, arch.head_channels * last, CONV_GAIN),
        )?
        .with_grad();
        let head_b = Tensor::zeros(&[arch.head_channels]).with_grad();
        let fc_w = Tensor::new(
            &[arch.head_channels, arch.num_classes],
            fan_in_uniform(rng, arch.head_channels, arch.head_channels * arch.num_classes, 1.0),
        )?
        .with_grad();
        let fc_b = Tensor::zeros(&[arch.num_classes]).with_grad();
        Ok(Network {
            stem_w,
            stem_b,
            layers,
            head_w,
            head_b,
            fc_w,
            fc_b,
        })
    }

    /// Every admissible candidate in every layer.
    pub fn supernet<R: Rng>(arch: &MacroArch, rng: &mut R) -> Result<Self> {
        let columns: Vec<Vec<usize>> = arch
            .tbs_layers
            .iter()
            .map(|l| (0..CANDIDATES.len()).filter(|&c| l.admits(c)).collect())
            .collect();
        Self::with_layers(arch, &columns, rng)
    }

    /// One candidate per layer, as chosen by `choices`.
    pub fn child<R: Rng>(arch: &MacroArch, choices: &[usize], rng: &mut R) -> Result<Self> {
        if choices.len() != arch.num_tbs() {
            return Err(Error::shape(format!(
                "{} choices for {} searchable layers",
                choices.len(),
                arch.num_tbs()
            )));
        }
        let columns: Vec<Vec<usize>> = choices.iter().map(|&c| vec![c]).collect();
        Self::with_layers(arch, &columns, rng)
    }

    /// Parameters in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem_w, &self.stem_b];
        for cand in self.layers.iter().flatten() {
            if let Some(p) = &cand.params {
                out.extend(p.tensors());
            }
        }
        out.extend([&self.head_w, &self.head_b, &self.fc_w, &self.fc_b]);
        out
    }

    /// Same order as [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem_w, &mut self.stem_b];
        for cand in self.layers.iter_mut().flatten() {
            if let Some(p) = &mut cand.params {
                out.extend(p.tensors_mut());
            }
        }
        out.extend([
            &mut self.head_w,
            &mut self.head_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a leaf. When `trainable` is false the
    /// leaves are constants and no weight gradients are computed.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> NetworkVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.leaf(t)
            } else {
                graph
                    .constant(t.shape(), t.data().to_vec())
                    .expect("parameter shapes are consistent")
            }
        };
        let stem_w = leaf(&self.stem_w);
        let stem_b = leaf(&self.stem_b);
        let layers = self
            .layers
            .iter()
            .map(|cands| {
                cands
                    .iter()
                    .map(|c| {
                        let vars = c.params.as_ref().map(|p| {
                            let [ew, eb, dw, db, pw, pb] = p.tensors().map(&mut leaf);
                            BlockVars {
                                expand_w: ew,
                                expand_b: eb,
                                depthwise_w: dw,
                                depthwise_b: db,
                                project_w: pw,
                                project_b: pb,
                            }
                        });
                        (c.column, vars)
                    })
                    .collect()
            })
            .collect();
        let head_w = leaf(&self.head_w);
        let head_b = leaf(&self.head_b);
        let fc_w = leaf(&self.fc_w);
        let fc_b = leaf(&self.fc_b);
        NetworkVars {
            stem_w,
            stem_b,
            layers,
            head_w,
            head_b,
            fc_w,
            fc_b,
        }
    }

    /// Adds the graph's gradients for `vars` into the parameter buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph, vars: &NetworkVars) -> Result<()> {
        for (t, v) in self.tensors_mut().into_iter().zip(vars.all()) {
            graph.accumulate_into(v, t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NetworkVars {
    pub stem_w: Var,
    pub stem_b: Var,
    pub layers: Vec<Vec<(usize, Option<BlockVars>)>>,
    pub head_w: Var,
    pub head_b: Var,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl NetworkVars {
    /// Same order as [`Network::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.stem_w, self.stem_b];
        for (_, v) in self.layers.iter().flatten() {
            if let Some(b) = v {
                out.extend(b.all());
            }
        }
        out.extend([self.head_w, self.head_b, self.fc_w, self.fc_b]);
        out
    }

    /// The same layout with its variables replaced, in [`NetworkVars::all`]
    /// order, by `vars`.
    pub fn with_vars(&self, vars: &[Var]) -> Result<NetworkVars> {
        if vars.len() != self.all().len() {
            return Err(Error::shape(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.all().len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let stem_w = next();
        let stem_b = next();
        let layers = self
            .layers
            .iter()
            .map(|cands| {
                cands
                    .iter()
                    .map(|(col, b)| {
                        let b = b.as_ref().map(|_| BlockVars {
                            expand_w: next(),
                            expand_b: next(),
                            depthwise_w: next(),
                            depthwise_b: next(),
                            project_w: next(),
                            project_b: next(),
                        });
                        (*col, b)
                    })
                    .collect()
            })
            .collect();
        Ok(NetworkVars {
            stem_w,
            stem_b,
            layers,
            head_w: next(),
            head_b: next(),
            fc_w: next(),
            fc_b: next(),
        })
    }
}

/// Stem, searchable layers, head. Layers with several candidates are mixed
/// with the matching row of `mask`; single-candidate layers run directly.
pub fn forward(
    graph: &mut Graph,
    arch: &MacroArch,
    vars: &NetworkVars,
    x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let xs = graph.shape(x);
    if xs.len() != 4
        || xs[1] != arch.input_channels
        || (xs[2], xs[3]) != arch.input_hw
    {
        return Err(Error::shape(format!(
            "input {:?} does not match [N,{},{},{}]",
            xs, arch.input_channels, arch.input_hw.0, arch.input_hw.1
        )));
    }
    let mut h = graph.conv2d(x, vars.stem_w, Some(vars.stem_b), arch.stem.stride, 1, 1)?;
    h = graph.relu(h);
    for (l, (layer, cands)) in arch.tbs_layers.iter().zip(&vars.layers).enumerate() {
        let mut outs = Vec::with_capacity(cands.len());
        for (column, bv) in cands {
            let y = block_forward(graph, &CANDIDATES[*column], layer, h, bv.as_ref())?;
            outs.push((*column, y));
        }
        h = match (outs.len(), mask) {
            (1, _) => outs[0].1,
            (_, Some(m)) => graph.mix(&outs, m, l)?,
            (_, None) => {
                return Err(Error::invalid(format!(
                    "layer {l} has {} candidates but no mask was given",
                    outs.len()
                )))
            }
        };
    }
    h = graph.conv2d(h, vars.head_w, Some(vars.head_b), 1, 0, 1)?;
    h = graph.relu(h);
    let pooled = graph.global_avg_pool(h)?;
    graph.linear(pooled, vars.fc_w, vars.fc_b)
}
