//! Candidate blocks and fixed macro-architectures.
//!
//! Every searchable ("TBS") layer chooses among nine columns: eight
//! inverted-bottleneck configurations and, last, an identity skip. The skip
//! column only exists when the layer keeps its channel count and stride 1.

use crate::autodiff::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Number of candidate columns per searchable layer.
pub const NUM_CANDIDATES: usize = 9;

/// Column index of the identity skip candidate.
pub const SKIP_INDEX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockConfig {
    pub expansion: usize,
    pub kernel: usize,
    pub groups: usize,
    pub is_skip: bool,
}

impl BlockConfig {
    const fn conv(expansion: usize, kernel: usize, groups: usize) -> Self {
        BlockConfig {
            expansion,
            kernel,
            groups,
            is_skip: false,
        }
    }

    pub const SKIP: BlockConfig = BlockConfig {
        expansion: 1,
        kernel: 1,
        groups: 1,
        is_skip: true,
    };

    /// Short label such as `e3_k5_g1` or `skip`.
    pub fn label(&self) -> String {
        if self.is_skip {
            "skip".to_string()
        } else {
            format!("e{}_k{}_g{}", self.expansion, self.kernel, self.groups)
        }
    }
}

/// Canonical column order shared by lookup tables, theta files and child nets.
pub const CANDIDATES: [BlockConfig; NUM_CANDIDATES] = [
    BlockConfig::conv(1, 3, 1),
    BlockConfig::conv(1, 5, 1),
    BlockConfig::conv(3, 3, 1),
    BlockConfig::conv(3, 5, 1),
    BlockConfig::conv(6, 3, 1),
    BlockConfig::conv(6, 5, 1),
    BlockConfig::conv(1, 3, 2),
    BlockConfig::conv(3, 3, 2),
    BlockConfig::SKIP,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub tbs: bool,
}

impl LayerSpec {
    pub fn tbs(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec {
            in_channels,
            out_channels,
            stride,
            tbs: true,
        }
    }

    pub fn skip_admissible(&self) -> bool {
        self.in_channels == self.out_channels && self.stride == 1
    }

    /// Whether column `index` is a valid choice for this layer.
    pub fn admits(&self, index: usize) -> bool {
        index < SKIP_INDEX || (index == SKIP_INDEX && self.skip_admissible())
    }

    /// Admissibility flags for all nine columns.
    pub fn admissible_mask(&self) -> [bool; NUM_CANDIDATES] {
        std::array::from_fn(|i| self.admits(i))
    }
}

/// The eight bottleneck configurations, followed by skip when admissible.
/// Position in the returned list equals the column index.
pub fn candidate_blocks(layer: &LayerSpec) -> Result<Vec<BlockConfig>> {
    if !layer.tbs {
        return Err(Error::invalid("candidate blocks requested for a fixed layer"));
    }
    let n = if layer.skip_admissible() {
        NUM_CANDIDATES
    } else {
        NUM_CANDIDATES - 1
    };
    Ok(CANDIDATES[..n].to_vec())
}

/// Closed-form trainable parameter count of one candidate (weights + biases).
pub fn block_param_count(cfg: &BlockConfig, layer: &LayerSpec) -> usize {
    if cfg.is_skip {
        return 0;
    }
    let (cin, cout, g) = (layer.in_channels, layer.out_channels, cfg.groups);
    let hidden = cfg.expansion * cin;
    (hidden * cin / g + hidden) + (hidden * cfg.kernel * cfg.kernel + hidden) + (cout * hidden / g + cout)
}

fn check_block(cfg: &BlockConfig, layer: &LayerSpec) -> Result<()> {
    if cfg.is_skip {
        if !layer.skip_admissible() {
            return Err(Error::invalid(format!(
                "skip is inadmissible for layer {}->{} stride {}",
                layer.in_channels, layer.out_channels, layer.stride
            )));
        }
        return Ok(());
    }
    let hidden = cfg.expansion * layer.in_channels;
    for (what, c) in [
        ("input", layer.in_channels),
        ("hidden", hidden),
        ("output", layer.out_channels),
    ] {
        if c % cfg.groups != 0 {
            return Err(Error::invalid(format!(
                "{what} channels {c} not divisible by groups {}",
                cfg.groups
            )));
        }
    }
    if cfg.kernel % 2 == 0 {
        return Err(Error::invalid(format!("kernel {} must be odd", cfg.kernel)));
    }
    Ok(())
}

/// Weights of one non-skip candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub expand_w: Tensor,
    pub expand_b: Tensor,
    pub depthwise_w: Tensor,
    pub depthwise_b: Tensor,
    pub project_w: Tensor,
    pub project_b: Tensor,
}

impl BlockParams {
    /// Allocates weights for `cfg` in `layer`, filling each weight from
    /// `init(fan_in, len)`. Biases start at zero.
    pub fn new(
        cfg: &BlockConfig,
        layer: &LayerSpec,
        mut init: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        check_block(cfg, layer)?;
        if cfg.is_skip {
            return Err(Error::invalid("skip blocks have no parameters"));
        }
        let (cin, cout, g, k) = (layer.in_channels, layer.out_channels, cfg.groups, cfg.kernel);
        let hidden = cfg.expansion * cin;
        let mut weight = |shape: [usize; 4]| {
            let fan_in = shape[1] * shape[2] * shape[3];
            let len = shape.iter().product();
            Tensor::new(&shape, init(fan_in, len)).map(Tensor::with_grad)
        };
        let expand_w = weight([hidden, cin / g, 1, 1])?;
        let depthwise_w = weight([hidden, 1, k, k])?;
        let project_w = weight([cout, hidden / g, 1, 1])?;
        Ok(BlockParams {
            expand_w,
            expand_b: Tensor::zeros(&[hidden]).with_grad(),
            depthwise_w,
            depthwise_b: Tensor::zeros(&[hidden]).with_grad(),
            project_w,
            project_b: Tensor::zeros(&[cout]).with_grad(),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.expand_w,
            &self.expand_b,
            &self.depthwise_w,
            &self.depthwise_b,
            &self.project_w,
            &self.project_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.expand_w,
            &mut self.expand_b,
            &mut self.depthwise_w,
            &mut self.depthwise_b,
            &mut self.project_w,
            &mut self.project_b,
        ]
    }

    pub fn register(&self, graph: &mut Graph) -> BlockVars {
        let [ew, eb, dw, db, pw, pb] = self.tensors().map(|t| graph.leaf(t));
        BlockVars {
            expand_w: ew,
            expand_b: eb,
            depthwise_w: dw,
            depthwise_b: db,
            project_w: pw,
            project_b: pb,
        }
    }
}

/// Graph handles for a registered [`BlockParams`].
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub expand_w: Var,
    pub expand_b: Var,
    pub depthwise_w: Var,
    pub depthwise_b: Var,
    pub project_w: Var,
    pub project_b: Var,
}

impl BlockVars {
    pub fn all(&self) -> [Var; 6] {
        [
            self.expand_w,
            self.expand_b,
            self.depthwise_w,
            self.depthwise_b,
            self.project_w,
            self.project_b,
        ]
    }
}

/// Pointwise expand, ReLU, depthwise KxK (carrying the stride), ReLU,
/// pointwise project. With two groups a channel shuffle follows each
/// pointwise conv. Stride-1 equal-width blocks add the input back.
pub fn block_forward(
    graph: &mut Graph,
    cfg: &BlockConfig,
    layer: &LayerSpec,
    x: Var,
    params: Option<&BlockVars>,
) -> Result<Var> {
    let shape = graph.shape(x);
    if shape.len() != 4 || shape[1] != layer.in_channels {
        return Err(Error::shape(format!(
            "block input {:?} does not carry {} channels",
            shape, layer.in_channels
        )));
    }
    check_block(cfg, layer)?;
    if cfg.is_skip {
        return Ok(x);
    }
    let p = params.ok_or_else(|| Error::invalid("non-skip block needs parameters"))?;
    let hidden = cfg.expansion * layer.in_channels;
    let mut h = graph.conv2d(x, p.expand_w, Some(p.expand_b), 1, 0, cfg.groups)?;
    if cfg.groups > 1 {
        h = graph.channel_shuffle(h, cfg.groups)?;
    }
    h = graph.relu(h);
    h = graph.conv2d(
        h,
        p.depthwise_w,
        Some(p.depthwise_b),
        layer.stride,
        cfg.kernel / 2,
        hidden,
    )?;
    h = graph.relu(h);
    h = graph.conv2d(h, p.project_w, Some(p.project_b), 1, 0, cfg.groups)?;
    if cfg.groups > 1 {
        h = graph.channel_shuffle(h, cfg.groups)?;
    }
    if layer.skip_admissible() {
        h = graph.add(h, x)?;
    }
    Ok(h)
}

/// Stem and head settings around the searchable layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroArch {
    pub name: String,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    /// 3x3 stem convolution.
    pub stem: LayerSpec,
    pub tbs_layers: Vec<LayerSpec>,
    /// Width of the 1x1 head convolution before pooling.
    pub head_channels: usize,
    pub num_classes: usize,
}

/// A user-described architecture, e.g. from a run-config file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitArch {
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// `(in, out, stride)` for each searchable layer.
    pub layers: Vec<(usize, usize, usize)>,
    pub head_channels: usize,
}

pub enum ArchSource<'a> {
    Preset(&'a str),
    Explicit(&'a ExplicitArch),
}

pub const DESK_TBS_LAYERS: usize = 6;

impl MacroArch {
    pub fn num_tbs(&self) -> usize {
        self.tbs_layers.len()
    }

    /// Spatial size entering each searchable layer, after the stem.
    pub fn layer_input_hw(&self) -> Vec<(usize, usize)> {
        let mut hw = (
            self.input_hw.0.div_ceil(self.stem.stride),
            self.input_hw.1.div_ceil(self.stem.stride),
        );
        let mut out = Vec::with_capacity(self.tbs_layers.len());
        for layer in &self.tbs_layers {
            out.push(hw);
            hw = (hw.0.div_ceil(layer.stride), hw.1.div_ceil(layer.stride));
        }
        out
    }

    /// Admissibility of every `(layer, column)` cell.
    pub fn admissible(&self) -> Vec<[bool; NUM_CANDIDATES]> {
        self.tbs_layers.iter().map(LayerSpec::admissible_mask).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.tbs_layers.is_empty() {
            return Err(Error::invalid("architecture has no searchable layers"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut c = self.stem.out_channels;
        for (i, layer) in self.tbs_layers.iter().enumerate() {
            if layer.in_channels != c {
                return Err(Error::shape(format!(
                    "layer {i} expects {} input channels but receives {c}",
                    layer.in_channels
                )));
            }
            if !(1..=2).contains(&layer.stride) {
                return Err(Error::invalid(format!("layer {i} stride must be 1 or 2")));
            }
            if layer.in_channels % 2 != 0 || layer.out_channels % 2 != 0 {
                return Err(Error::invalid(format!(
                    "layer {i} channel counts must be even for two-group candidates"
                )));
            }
            c = layer.out_channels;
        }
        Ok(())
    }
}

fn desk_arch(num_tbs: usize, num_classes: usize) -> Result<MacroArch> {
    const SCHEDULE: [(usize, usize, usize); DESK_TBS_LAYERS] = [
        (8, 8, 1),
        (8, 16, 2),
        (16, 16, 1),
        (16, 24, 2),
        (24, 24, 1),
        (24, 24, 1),
    ];
    if num_tbs == 0 {
        return Err(Error::invalid("desk preset needs at least one layer"));
    }
    // Extra layers beyond the schedule repeat the last width at stride 1.
    let layers = (0..num_tbs)
        .map(|i| {
            let (a, b, s) = SCHEDULE[i.min(DESK_TBS_LAYERS - 1)];
            if i < DESK_TBS_LAYERS {
                LayerSpec::tbs(a, b, s)
            } else {
                LayerSpec::tbs(b, b, 1)
            }
        })
        .collect();
    Ok(MacroArch {
        name: if num_tbs == DESK_TBS_LAYERS {
            "desk".to_string()
        } else {
            format!("desk:{num_tbs}")
        },
        input_channels: 3,
        input_hw: (8, 8),
        stem: LayerSpec {
            in_channels: 3,
            out_channels: 8,
            stride: 1,
            tbs: false,
        },
        tbs_layers: layers,
        head_channels: 64,
        num_classes,
    })
}

fn full_arch(num_classes: usize) -> MacroArch {
    // (width, repeats, first stride)
    const STAGES: [(usize, usize, usize); 7] = [
        (16, 1, 1),
        (24, 4, 2),
        (32, 4, 2),
        (64, 4, 2),
        (112, 4, 1),
        (184, 4, 2),
        (352, 1, 1),
    ];
    let mut layers = Vec::new();
    let mut c = 16;
    for (width, repeats, stride) in STAGES {
        for r in 0..repeats {
            layers.push(LayerSpec::tbs(c, width, if r == 0 { stride } else { 1 }));
            c = width;
        }
    }
    MacroArch {
        name: "full".to_string(),
        input_channels: 3,
        input_hw: (32, 32),
        stem: LayerSpec {
            in_channels: 3,
            out_channels: 16,
            stride: 1,
            tbs: false,
        },
        tbs_layers: layers,
        head_channels: 1984,
        num_classes,
    }
}

/// Resolves a preset (`full`, `desk`, or `desk:<layers>`) or an explicit
/// layer list into a validated [`MacroArch`].
pub fn build_macro(source: ArchSource<'_>, num_classes: usize) -> Result<MacroArch> {
    let arch = match source {
        ArchSource::Preset("full") => full_arch(num_classes),
        ArchSource::Preset("desk") => desk_arch(DESK_TBS_LAYERS, num_classes)?,
        ArchSource::Preset(name) => match name.strip_prefix("desk:").map(str::parse::<usize>) {
            Some(Ok(n)) => desk_arch(n, num_classes)?,
            _ => return Err(Error::invalid(format!("unknown architecture preset '{name}'"))),
        },
        ArchSource::Explicit(e) => MacroArch {
            name: "custom".to_string(),
            input_channels: e.input_channels,
            input_hw: e.input_hw,
            stem: LayerSpec {
                in_channels: e.input_channels,
                out_channels: e.stem_channels,
                stride: e.stem_stride,
                tbs: false,
            },
            tbs_layers: e
                .layers
                .iter()
                .map(|&(i, o, s)| LayerSpec::tbs(i, o, s))
                .collect(),
            head_channels: e.head_channels,
            num_classes,
        },
    };
    arch.validate()?;
    Ok(arch)
}
