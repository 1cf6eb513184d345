//! Brute-force references for small search spaces and numerical gradients.
//!
//! Architectures of a [`MicroSpace`] are indexed lexicographically with
//! layer 0 as the most significant digit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::childnet::ChildNet;
use crate::costmodel::{CostTable, Metric};
use crate::network::Network;
use crate::searchspace::{build_macro, ArchSource, ExplicitArch, MacroArch, NUM_CANDIDATES};
use crate::supernet::{
    argmax_low, gumbel_softmax, sample_gumbel, supernet_forward, total_loss, LossKnobs, Theta,
};
use crate::{Error, Result};

pub const MAX_LAYERS: usize = 4;
pub const MAX_CANDIDATES: usize = 4;

/// Arch name recorded on enumerated children.
pub const MICRO_ARCH: &str = "micro";

/// An enumerable space with fixed per-architecture CE proxies.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroSpace {
    pub lat: CostTable,
    pub ener: CostTable,
    /// One value per architecture, in enumeration order.
    pub ce: Vec<f64>,
}

impl MicroSpace {
    pub fn new(lat: CostTable, ener: CostTable, ce: Vec<f64>) -> Result<Self> {
        let (l, k) = (lat.num_layers(), lat.num_blocks());
        if l == 0 || l > MAX_LAYERS || k == 0 || k > MAX_CANDIDATES {
            return Err(Error::invalid(format!(
                "micro space {l}x{k} outside 1..={MAX_LAYERS} layers, 1..={MAX_CANDIDATES} candidates"
            )));
        }
        if ener.num_layers() != l || ener.num_blocks() != k {
            return Err(Error::shape(format!(
                "latency table {l}x{k}, energy table {}x{}",
                ener.num_layers(),
                ener.num_blocks()
            )));
        }
        if lat.rows().iter().chain(ener.rows()).flatten().any(Option::is_none) {
            return Err(Error::invalid("micro space tables must be fully populated"));
        }
        let n = k.pow(l as u32);
        if ce.len() != n {
            return Err(Error::shape(format!("{} CE values for {n} architectures", ce.len())));
        }
        Ok(MicroSpace { lat, ener, ce })
    }

    /// Uniform random costs in `[0.1, 10)` and CE proxies in `[0, 2)`.
    pub fn random<R: Rng>(rng: &mut R, layers: usize, candidates: usize) -> Result<Self> {
        let mut table = |metric| {
            let rows = (0..layers)
                .map(|_| (0..candidates).map(|_| Some(rng.gen_range(0.1..10.0))).collect())
                .collect();
            CostTable::new(metric, rows)
        };
        let lat = table(Metric::Latency)?;
        let ener = table(Metric::Energy)?;
        let n = candidates.checked_pow(layers as u32).unwrap_or(usize::MAX);
        if n > MAX_CANDIDATES.pow(MAX_LAYERS as u32) {
            return Err(Error::invalid(format!("{n} architectures exceed the enumeration bound")));
        }
        let ce = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        Self::new(lat, ener, ce)
    }

    pub fn layers(&self) -> usize {
        self.lat.num_layers()
    }

    pub fn candidates(&self) -> usize {
        self.lat.num_blocks()
    }

    pub fn num_architectures(&self) -> usize {
        self.ce.len()
    }

    /// Choices of architecture `index`.
    pub fn decode(&self, index: usize) -> Vec<usize> {
        let k = self.candidates();
        let mut out = vec![0; self.layers()];
        let mut rest = index;
        for slot in out.iter_mut().rev() {
            *slot = rest % k;
            rest /= k;
        }
        out
    }

    pub fn encode(&self, choices: &[usize]) -> usize {
        choices.iter().fold(0, |acc, &c| acc * self.candidates() + c)
    }

    fn arch_cost(&self, choices: &[usize]) -> (f64, f64) {
        choices.iter().enumerate().fold((0.0, 0.0), |(l, e), (layer, &c)| {
            (
                l + self.lat.get(layer, c).unwrap_or(0.0),
                e + self.ener.get(layer, c).unwrap_or(0.0),
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enumerated {
    pub child: ChildNet,
    pub lat: f64,
    pub ener: f64,
    pub ce: f64,
}

/// Every architecture with its table-summed costs, in index order.
pub fn enumerate(space: &MicroSpace) -> Vec<Enumerated> {
    (0..space.num_architectures())
        .map(|i| {
            let choices = space.decode(i);
            let (lat, ener) = space.arch_cost(&choices);
            Enumerated {
                child: ChildNet {
                    arch: MICRO_ARCH.to_string(),
                    choices,
                },
                lat,
                ener,
                ce: space.ce[i],
            }
        })
        .collect()
}

fn check_theta(theta: &Theta, space: &MicroSpace) -> Result<()> {
    if theta.rows() != space.layers() || theta.cols() != space.candidates() {
        return Err(Error::shape(format!(
            "theta {}x{} for a {}x{} micro space",
            theta.rows(),
            theta.cols(),
            space.layers(),
            space.candidates()
        )));
    }
    Ok(())
}

/// `P(a | theta) = prod_l softmax(theta_l)[a_l]` for every architecture.
pub fn architecture_probabilities(theta: &Theta, space: &MicroSpace) -> Result<Vec<f64>> {
    check_theta(theta, space)?;
    let p = theta.probabilities();
    let k = space.candidates();
    Ok((0..space.num_architectures())
        .map(|i| {
            space
                .decode(i)
                .iter()
                .enumerate()
                .map(|(l, &c)| p[l * k + c])
                .product()
        })
        .collect())
}

/// `sum_a P(a | theta) * (ce_a + alpha * lat_a^beta + gamma * ener_a^delta)`.
pub fn exact_expected_loss(theta: &Theta, space: &MicroSpace, knobs: &LossKnobs) -> Result<f64> {
    knobs.validate()?;
    let probs = architecture_probabilities(theta, space)?;
    Ok(enumerate(space)
        .iter()
        .zip(&probs)
        .map(|(a, p)| {
            p * (a.ce
                + knobs.alpha * a.lat.powf(knobs.beta)
                + knobs.gamma * a.ener.powf(knobs.delta))
        })
        .sum())
}

/// The relaxed counterpart: expected CE plus the knob terms applied to the
/// expected costs under `mask = softmax(theta)`. Agrees with
/// [`exact_expected_loss`] when `beta = delta = 1`.
pub fn relaxed_expected_loss(theta: &Theta, space: &MicroSpace, knobs: &LossKnobs) -> Result<f64> {
    let probs = architecture_probabilities(theta, space)?;
    let ce: f64 = probs.iter().zip(&space.ce).map(|(p, c)| p * c).sum();
    let (_, loss) = relaxed_cost_loss(theta, space, knobs, ce)?;
    Ok(loss)
}

/// Cost part of the relaxed loss on a graph; returns `(d loss / d theta, loss)`.
fn relaxed_cost_loss(
    theta: &Theta,
    space: &MicroSpace,
    knobs: &LossKnobs,
    ce: f64,
) -> Result<(Vec<f64>, f64)> {
    check_theta(theta, space)?;
    let mut g = Graph::new();
    let t = theta.register(&mut g, true);
    let noise = vec![0.0; theta.logits().len()];
    let mask = g.gumbel_softmax(t, &noise, 1.0)?;
    let lat = crate::supernet::expected_cost(&mut g, mask, &space.lat)?;
    let ener = crate::supernet::expected_cost(&mut g, mask, &space.ener)?;
    let ce = g.constant(&[1], vec![ce])?;
    let (total, parts) = total_loss(&mut g, ce, lat, ener, knobs)?;
    g.backward(total)?;
    let grad = g.grad(t).map_or_else(|| vec![0.0; theta.logits().len()], <[f64]>::to_vec);
    Ok((grad, parts.total))
}

/// Gradient descent on the relaxed cost-only loss from a uniform start.
pub fn relaxed_descent(space: &MicroSpace, knobs: &LossKnobs, steps: usize, lr: f64) -> Result<Theta> {
    let mut theta = Theta::new(
        space.layers(),
        space.candidates(),
        vec![0.0; space.layers() * space.candidates()],
    )?;
    for _ in 0..steps {
        let (grad, _) = relaxed_cost_loss(&theta, space, knobs, 0.0)?;
        for (v, d) in theta.logits_mut().iter_mut().zip(&grad) {
            *v -= lr * d;
        }
    }
    Ok(theta)
}

/// Architectures not dominated in (latency, energy), both minimised.
pub fn cost_pareto_set(entries: &[Enumerated]) -> Vec<usize> {
    (0..entries.len())
        .filter(|&i| {
            let a = &entries[i];
            !entries.iter().any(|b| {
                b.lat <= a.lat && b.ener <= a.ener && (b.lat < a.lat || b.ener < a.ener)
            })
        })
        .collect()
}

/// Architecture frequencies from `draws` hard-argmax Gumbel-softmax masks.
pub fn gumbel_frequencies<R: Rng>(
    theta: &Theta,
    space: &MicroSpace,
    tau: f64,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_theta(theta, space)?;
    let (l, k) = (space.layers(), space.candidates());
    let mut counts = vec![0usize; space.num_architectures()];
    let mut choices = vec![0; l];
    for _ in 0..draws {
        let noise = sample_gumbel(rng, l, k);
        for (row, slot) in choices.iter_mut().enumerate() {
            let m = gumbel_softmax(theta.row(row), &noise[row * k..][..k], tau)?;
            *slot = argmax_low(&m);
        }
        counts[space.encode(&choices)] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect())
}

/// `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe)?;
        probe[i] = orig - eps;
        let lo = f(&probe)?;
        probe[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero entries
/// from dominating.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`relative_error`].
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every element of every input, returning the largest
/// [`relative_error`]. Non-scalar outputs are reduced with a fixed weighted
/// sum so every output element contributes.
///
/// Each element is differenced at `eps` and `eps / 4` and the closer
/// estimate is kept: a step that straddles a ReLU kink is off at one scale,
/// while a wrong analytic gradient is off at both.
pub fn gradient_check<F>(inputs: &[Tensor], eps: f64, floor: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.leaf(&t.clone().with_grad()))
            .collect();
        let out = build(&mut g, &vars)?;
        let weights: Vec<f64> = (0..g.value(out).len())
            .map(|i| 0.5 + (i as f64 * 0.618).fract())
            .collect();
        let loss = g.dot_const(out, &weights)?;
        let value = g.scalar_value(loss);
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let orig = probe[k].data()[i];
            let mut best = f64::INFINITY;
            for h in [eps, eps / 4.0] {
                probe[k].data_mut()[i] = orig + h;
                let hi = eval(&probe, false)?.0;
                probe[k].data_mut()[i] = orig - h;
                let lo = eval(&probe, false)?.0;
                let numeric = (hi - lo) / (2.0 * h);
                best = best.min(relative_error(analytic[k][i], numeric, floor));
            }
            probe[k].data_mut()[i] = orig;
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

/// Two searchable layers (4->4 stride 1, 4->8 stride 2) on 2x4x4 inputs
/// with 3 classes.
pub fn micro_supernet_arch() -> Result<MacroArch> {
    build_macro(
        ArchSource::Explicit(&ExplicitArch {
            input_channels: 2,
            input_hw: (4, 4),
            stem_channels: 4,
            stem_stride: 1,
            layers: vec![(4, 4, 1), (4, 8, 2)],
            head_channels: 8,
        }),
        3,
    )
}

/// Finite-difference check of the full search loss (cross-entropy plus
/// both knob terms) with respect to every weight and every theta logit of
/// a seeded [`micro_supernet_arch`] network.
pub fn micro_supernet_gradient_check(seed: u64, eps: f64, floor: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = micro_supernet_arch()?;
    let net = Network::supernet(&arch, &mut rng)?;
    let mut theta = Theta::constant(&arch, 0.0);
    for v in theta.logits_mut().iter_mut().filter(|v| v.is_finite()) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let table = |rng: &mut ChaCha8Rng, metric| {
        let rows = arch
            .tbs_layers
            .iter()
            .map(|layer| {
                (0..NUM_CANDIDATES)
                    .map(|c| layer.admits(c).then(|| rng.gen_range(0.5..2.0)))
                    .collect()
            })
            .collect();
        CostTable::new(metric, rows)
    };
    let lat = table(&mut rng, Metric::Latency)?;
    let ener = table(&mut rng, Metric::Energy)?;
    let x = Tensor::new(
        &[2, 2, 4, 4],
        (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
    let noise = sample_gumbel(&mut rng, arch.num_tbs(), NUM_CANDIDATES);
    let knobs = LossKnobs::new(0.3, 1.5, 0.2, 0.7)?;
    let tau = 1.3;

    let mut template_graph = Graph::new();
    let template = net.register(&mut template_graph, true);
    let mut inputs: Vec<Tensor> = net.tensors().into_iter().cloned().collect();
    // Zero biases leave pre-activations exactly on the ReLU kink wherever the
    // receptive field is all zeros, where central differences are one-sided.
    for t in inputs.iter_mut().filter(|t| t.shape().len() == 1) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
    }
    let n = inputs.len();
    inputs.push(Tensor::new(&[theta.rows(), theta.cols()], theta.logits().to_vec())?);
    gradient_check(&inputs, eps, floor, |g, v| {
        let weights = template.with_vars(&v[..n])?;
        let xv = g.leaf(&x);
        let out = supernet_forward(g, &arch, &weights, xv, v[n], &noise, tau, (&lat, &ener))?;
        let ce = g.softmax_cross_entropy(out.logits, &labels)?;
        Ok(total_loss(g, ce, out.lat, out.ener, &knobs)?.0)
    })
}
