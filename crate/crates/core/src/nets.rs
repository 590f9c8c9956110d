//! Policy, memory unit and evolved loss network.
//!
//! All three come in two flavours: a plain forward pass over `f64` slices
//! (used while acting) and a graph builder that wires the same arithmetic
//! into an autodiff [`Graph`] so gradients can flow from the loss output
//! back into policy and memory parameters.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Width of the memory unit output and of the context vector.
pub const MEMORY_WIDTH: usize = 32;
pub const CONTEXT_WIDTH: usize = 32;
/// Length of the constant all-ones vector fed to the memory unit.
pub const MEMORY_INPUT: usize = 32;

pub const CONV1_KERNEL: usize = 8;
pub const CONV1_STRIDE: usize = 7;
pub const CONV1_CHANNELS: usize = 10;
pub const CONV2_KERNEL: usize = 4;
pub const CONV2_STRIDE: usize = 2;
pub const CONV2_CHANNELS: usize = 10;
pub const HEAD_HIDDEN: usize = 16;

/// Fully connected layer, `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn scaled_normal(input: usize, output: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / libm::sqrt(input as f64);
        let data = (0..input * output).map(|_| std * rng::normal(rng)).collect();
        Self { weight: Tensor::new(vec![input, output], data).expect("shape"), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let out = self.output_dim();
        let mut y = self.bias.data().to_vec();
        let w = self.weight.data();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yj, wij) in y.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                *yj += xi * wij;
            }
        }
        y
    }

    /// Declares weight and bias as graph inputs.
    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> DenseVars {
        let decl = |g: &mut Graph, s: &[usize]| if differentiable { g.input(s) } else { g.constant_input(s) };
        DenseVars { weight: decl(g, self.weight.shape()), bias: decl(g, self.bias.shape()) }
    }

    pub fn feed(&self, inputs: &mut Vec<Tensor>) {
        inputs.push(self.weight.clone());
        inputs.push(self.bias.clone());
    }

    /// Bakes weight and bias into the graph as constants.
    pub fn embed(&self, g: &mut Graph) -> DenseVars {
        DenseVars { weight: g.constant(self.weight.clone()), bias: g.constant(self.bias.clone()) }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(self.bias.data());
    }

    fn read_flat(&mut self, src: &mut &[f64]) {
        let (w, rest) = src.split_at(self.weight.len());
        self.weight.data_mut().copy_from_slice(w);
        let (b, rest) = rest.split_at(self.bias.len());
        self.bias.data_mut().copy_from_slice(b);
        *src = rest;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    /// `x W + b` for a batch `x` of shape `[rows, in]`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add_row(h, self.bias)
    }
}

// ---------------------------------------------------------------------------
// Policy

/// Shape of the Gaussian MLP policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
}

impl PolicyArch {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: Vec<usize>) -> Self {
        Self { obs_dim, act_dim, hidden }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.obs_dim];
        w.extend_from_slice(&self.hidden);
        w.push(self.act_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        let w = self.widths();
        w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>() + self.act_dim
    }
}

/// Diagonal Gaussian policy: tanh MLP mean and a state-independent log std.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub layers: Vec<Dense>,
    pub log_std: Vec<f64>,
}

impl PolicyParams {
    /// Fan-in scaled Gaussian weights, zero biases, unit std.
    pub fn init(arch: &PolicyArch, rng: &mut Rng) -> Self {
        let w = arch.widths();
        let layers = w.windows(2).map(|p| Dense::scaled_normal(p[0], p[1], 1.0, rng)).collect();
        Self { layers, log_std: vec![0.0; arch.act_dim] }
    }

    pub fn zeros(arch: &PolicyArch) -> Self {
        let w = arch.widths();
        let layers = w.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect();
        Self { layers, log_std: vec![0.0; arch.act_dim] }
    }

    pub fn arch(&self) -> PolicyArch {
        let obs_dim = self.layers[0].input_dim();
        let hidden = self.layers[..self.layers.len() - 1].iter().map(Dense::output_dim).collect();
        PolicyArch { obs_dim, act_dim: self.log_std.len(), hidden }
    }

    pub fn obs_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum::<usize>() + self.log_std.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| libm::exp(*l)).collect()
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.obs_dim() {
            return Err(Error::Dimension { what: "policy state", expected: self.obs_dim(), found: state.len() });
        }
        let last = self.layers.len() - 1;
        let mut h = state.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = libm::tanh(*v));
            }
        }
        Ok(h)
    }

    /// Mean and standard deviation of the action distribution at `state`.
    pub fn forward(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.mean(state)?, self.std()))
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.act_dim() {
            return Err(Error::Dimension { what: "policy action", expected: self.act_dim(), found: action.len() });
        }
        let mean = self.mean(state)?;
        Ok(diag_gaussian_log_prob(&mean, &self.log_std, action))
    }

    /// Draws `mean + std * z` with standard normal `z`.
    pub fn sample(&self, state: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let mean = self.mean(state)?;
        let action = mean.iter().zip(&self.log_std).map(|(m, l)| m + libm::exp(*l) * rng::normal(rng)).collect();
        Ok((action, mean))
    }

    /// Layer weights and biases in order, then the log std.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.write_flat(&mut out);
        }
        out.extend_from_slice(&self.log_std);
        out
    }

    pub fn unflatten(arch: &PolicyArch, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::Dimension {
                what: "policy flat vector",
                expected: arch.param_count(),
                found: flat.len(),
            });
        }
        let mut p = Self::zeros(arch);
        let mut src = flat;
        for l in &mut p.layers {
            l.read_flat(&mut src);
        }
        p.log_std.copy_from_slice(src);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> PolicyVars {
        let layers = self.layers.iter().map(|l| l.declare(g, differentiable)).collect();
        let log_std = if differentiable { g.input(&[self.act_dim()]) } else { g.constant_input(&[self.act_dim()]) };
        PolicyVars { layers, log_std }
    }

    /// Pushes tensors in the order `declare` created the inputs.
    pub fn feed(&self, inputs: &mut Vec<Tensor>) {
        for l in &self.layers {
            l.feed(inputs);
        }
        inputs.push(Tensor::vector(self.log_std.clone()));
    }

    pub fn embed(&self, g: &mut Graph) -> PolicyVars {
        let layers = self.layers.iter().map(|l| l.embed(g)).collect();
        PolicyVars { layers, log_std: g.constant(Tensor::vector(self.log_std.clone())) }
    }
}

pub fn diag_gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let ln_2pi = libm::log(2.0 * PI);
    -0.5 * mean
        .iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, l), a)| {
            let z = (a - m) / libm::exp(*l);
            z * z + 2.0 * l + ln_2pi
        })
        .sum::<f64>()
}

/// KL(p ‖ q) between diagonal Gaussians.
pub fn diag_gaussian_kl(mean_p: &[f64], std_p: &[f64], mean_q: &[f64], std_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for j in 0..mean_p.len() {
        let d = mean_p[j] - mean_q[j];
        kl += libm::log(std_q[j] / std_p[j]) + (std_p[j] * std_p[j] + d * d) / (2.0 * std_q[j] * std_q[j]) - 0.5;
    }
    kl
}

/// Mean KL(before ‖ after) over probe states.
pub fn policy_kl(before: &PolicyParams, after: &PolicyParams, states: &[Vec<f64>]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Dimension { what: "kl probe states", expected: 1, found: 0 });
    }
    let (sb, sa) = (before.std(), after.std());
    let mut total = 0.0;
    for s in states {
        total += diag_gaussian_kl(&before.mean(s)?, &sb, &after.mean(s)?, &sa);
    }
    // clamp rounding noise around identical distributions
    Ok((total / states.len() as f64).max(0.0))
}

#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub layers: Vec<DenseVars>,
    pub log_std: Var,
}

impl PolicyVars {
    /// Mean actions for a batch of states `[rows, obs_dim]`.
    pub fn mean(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = states;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(g, h)?;
            if i < last {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Per-row diagonal-Gaussian log density of `actions` under the policy.
    pub fn log_prob(&self, g: &mut Graph, states: Var, actions: Var) -> Result<Var> {
        let mean = self.mean(g, states)?;
        self.log_prob_with_mean(g, mean, actions)
    }

    /// Log density given an already-built mean node.
    pub fn log_prob_with_mean(&self, g: &mut Graph, mean: Var, actions: Var) -> Result<Var> {
        let diff = g.sub(actions, mean)?;
        let neg = g.scale(self.log_std, -1.0)?;
        let inv_std = g.exp(neg)?;
        let z = g.mul_row(diff, inv_std)?;
        let z2 = g.square(z)?;
        let quad = g.row_sum(z2)?;
        let act_dim = g.shape(self.log_std)[0] as f64;
        let log_std_sum = g.sum(self.log_std)?;
        let rows = g.shape(quad)[0];
        let ls = g.reshape(log_std_sum, &[1])?;
        let ls_rows = g.broadcast_rows(ls, rows)?;
        let ls_col = g.reshape(ls_rows, &[rows])?;
        let half = g.scale(quad, -0.5)?;
        let with_std = g.sub(half, ls_col)?;
        g.offset(with_std, -0.5 * act_dim * libm::log(2.0 * PI))
    }
}

// ---------------------------------------------------------------------------
// Memory

/// Single tanh layer fed a constant vector of ones.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub dense: Dense,
}

impl MemoryState {
    pub fn zeros() -> Self {
        Self { dense: Dense::zeros(MEMORY_INPUT, MEMORY_WIDTH) }
    }

    pub fn random(rng: &mut Rng) -> Self {
        let mut dense = Dense::scaled_normal(MEMORY_INPUT, MEMORY_WIDTH, 1.0, rng);
        dense.bias.data_mut().iter_mut().for_each(|b| *b = 0.1 * rng::normal(rng));
        Self { dense }
    }

    pub fn param_count() -> usize {
        MEMORY_INPUT * MEMORY_WIDTH + MEMORY_WIDTH
    }

    pub fn forward(&self) -> Vec<f64> {
        let ones = [1.0; MEMORY_INPUT];
        let mut y = self.dense.apply(&ones);
        y.iter_mut().for_each(|v| *v = libm::tanh(*v));
        y
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count());
        self.dense.write_flat(&mut out);
        out
    }

    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::param_count() {
            return Err(Error::Dimension {
                what: "memory flat vector",
                expected: Self::param_count(),
                found: flat.len(),
            });
        }
        let mut m = Self::zeros();
        let mut src = flat;
        m.dense.read_flat(&mut src);
        Ok(m)
    }

    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> MemoryVars {
        let ones = g.constant(Tensor::filled(&[1, MEMORY_INPUT], 1.0));
        MemoryVars { dense: self.dense.declare(g, differentiable), ones }
    }

    pub fn feed(&self, inputs: &mut Vec<Tensor>) {
        self.dense.feed(inputs);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    pub dense: DenseVars,
    pub ones: Var,
}

impl MemoryVars {
    /// Memory output as a `[1, MEMORY_WIDTH]` row.
    pub fn output(&self, g: &mut Graph) -> Result<Var> {
        let h = self.dense.apply(g, self.ones)?;
        g.tanh(h)
    }
}

// ---------------------------------------------------------------------------
// Loss network

/// Input groups of a loss feature row, in column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    State,
    Action,
    Done,
    Reward,
    Memory,
    PolicyMean,
    PolicyStd,
    Context,
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::State => "state",
            ChannelKind::Action => "action",
            ChannelKind::Done => "done",
            ChannelKind::Reward => "reward",
            ChannelKind::Memory => "memory",
            ChannelKind::PolicyMean => "policy_mean",
            ChannelKind::PolicyStd => "policy_std",
            ChannelKind::Context => "context",
        }
    }
}

/// Per-timestep channel plan shared by the buffer matrix and the head rows.
///
/// Buffer rows hold state, action, done flag, optional reward, memory
/// output and the policy mean and std. Head rows append the context vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub reward: bool,
}

impl FeatureLayout {
    pub fn new(obs_dim: usize, act_dim: usize, reward: bool) -> Self {
        Self { obs_dim, act_dim, reward }
    }

    /// `(kind, width)` for each buffer channel group, in column order.
    pub fn groups(&self) -> Vec<(ChannelKind, usize)> {
        let mut g =
            vec![(ChannelKind::State, self.obs_dim), (ChannelKind::Action, self.act_dim), (ChannelKind::Done, 1)];
        if self.reward {
            g.push((ChannelKind::Reward, 1));
        }
        g.extend([
            (ChannelKind::Memory, MEMORY_WIDTH),
            (ChannelKind::PolicyMean, self.act_dim),
            (ChannelKind::PolicyStd, self.act_dim),
        ]);
        g
    }

    /// Column range of a group in a buffer or head row.
    pub fn range(&self, kind: ChannelKind) -> Option<core::ops::Range<usize>> {
        if kind == ChannelKind::Context {
            let start = self.buffer_channels();
            return Some(start..start + CONTEXT_WIDTH);
        }
        let mut start = 0;
        for (k, w) in self.groups() {
            if k == kind {
                return Some(start..start + w);
            }
            start += w;
        }
        None
    }

    pub fn buffer_channels(&self) -> usize {
        self.groups().iter().map(|(_, w)| w).sum()
    }

    pub fn head_channels(&self) -> usize {
        self.buffer_channels() + CONTEXT_WIDTH
    }
}

/// Loss network shape: feature layout plus buffer length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossArch {
    pub layout: FeatureLayout,
    pub buffer_len: usize,
}

impl LossArch {
    pub fn new(layout: FeatureLayout, buffer_len: usize) -> Self {
        Self { layout, buffer_len }
    }

    pub fn conv1_len(&self) -> usize {
        (self.buffer_len - CONV1_KERNEL) / CONV1_STRIDE + 1
    }

    pub fn conv2_len(&self) -> usize {
        (self.conv1_len() - CONV2_KERNEL) / CONV2_STRIDE + 1
    }

    pub fn flat_len(&self) -> usize {
        self.conv2_len() * CONV2_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let min = CONV1_KERNEL + CONV1_STRIDE * (CONV2_KERNEL - 1);
        if self.buffer_len < min {
            return Err(Error::Config(alloc::format!("buffer length {} below minimum {min}", self.buffer_len)));
        }
        Ok(())
    }

    /// Named parameter shapes in flattening order.
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.layout.buffer_channels();
        vec![
            ("conv1.weight", vec![CONV1_CHANNELS, CONV1_KERNEL, c]),
            ("conv1.bias", vec![CONV1_CHANNELS]),
            ("conv2.weight", vec![CONV2_CHANNELS, CONV2_KERNEL, CONV1_CHANNELS]),
            ("conv2.bias", vec![CONV2_CHANNELS]),
            ("context.weight", vec![self.flat_len(), CONTEXT_WIDTH]),
            ("context.bias", vec![CONTEXT_WIDTH]),
            ("head_hidden.weight", vec![self.layout.head_channels(), HEAD_HIDDEN]),
            ("head_hidden.bias", vec![HEAD_HIDDEN]),
            ("head_out.weight", vec![HEAD_HIDDEN, 1]),
            ("head_out.bias", vec![1]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// How the output layer of a fresh loss is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInit {
    /// Output layer zeroed: the loss starts identically zero.
    Neutral,
    /// Output layer random like every other layer.
    Random,
}

/// Every evolved parameter of the loss: temporal convolutions, context
/// projection and the dense per-step head.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParams {
    arch: LossArch,
    tensors: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub context: DenseVars,
    pub hidden: DenseVars,
    pub out: DenseVars,
}

impl LossParams {
    pub fn init(arch: LossArch, head: HeadInit, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in arch.shapes() {
            let is_bias = name.ends_with(".bias");
            let is_out = name.starts_with("head_out");
            if is_bias || (is_out && head == HeadInit::Neutral) {
                tensors.push(Tensor::zeros(&shape));
                continue;
            }
            let fan_in: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
            let fan_in = if name.starts_with("conv") { shape[1] * shape[2] } else { fan_in };
            let std = 1.0 / libm::sqrt(fan_in as f64);
            let n = shape.iter().product();
            let data = (0..n).map(|_| std * rng::normal(rng)).collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { arch, tensors })
    }

    pub fn zeros(arch: LossArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, tensors: arch.shapes().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect() })
    }

    pub fn arch(&self) -> &LossArch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.arch.shapes().iter().position(|(n, _)| *n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.arch.shapes().iter().position(|(n, _)| *n == name)?;
        Some(&mut self.tensors[idx])
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(arch: LossArch, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::Dimension { what: "loss flat vector", expected: arch.param_count(), found: flat.len() });
        }
        let mut p = Self::zeros(arch)?;
        let mut offset = 0;
        for t in &mut p.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    /// Declares every loss tensor as a graph input.
    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> LossVars {
        let mut vars =
            self.tensors.iter().map(|t| if differentiable { g.input(t.shape()) } else { g.constant_input(t.shape()) });
        let mut next = || vars.next().expect("ten tensors");
        LossVars {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            context: DenseVars { weight: next(), bias: next() },
            hidden: DenseVars { weight: next(), bias: next() },
            out: DenseVars { weight: next(), bias: next() },
        }
    }

    pub fn feed(&self, inputs: &mut Vec<Tensor>) {
        inputs.extend(self.tensors.iter().cloned());
    }

    /// Bakes every loss tensor into the graph as a constant.
    pub fn embed(&self, g: &mut Graph) -> LossVars {
        let mut vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>().into_iter();
        let mut next = || vars.next().expect("ten tensors");
        LossVars {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            context: DenseVars { weight: next(), bias: next() },
            hidden: DenseVars { weight: next(), bias: next() },
            out: DenseVars { weight: next(), bias: next() },
        }
    }

    fn check_buffer(&self, buffer: &Tensor) -> Result<()> {
        let want = [self.arch.buffer_len, self.arch.layout.buffer_channels()];
        if buffer.shape() != want {
            return Err(Error::Shape {
                node: 0,
                op: "loss_context",
                detail: alloc::format!("buffer {:?}, expected {:?}", buffer.shape(), want),
            });
        }
        Ok(())
    }

    /// Context vector from an `[N, buffer_channels]` buffer matrix.
    pub fn context(&self, buffer: &Tensor) -> Result<Vec<f64>> {
        self.check_buffer(buffer)?;
        let mut g = Graph::new();
        let vars = self.declare(&mut g, false);
        let b = g.constant_input(buffer.shape());
        let ctx = vars.context(&mut g, b)?;
        let mut tape = g.finish(ctx);
        let mut inputs = Vec::with_capacity(11);
        self.feed(&mut inputs);
        inputs.push(buffer.clone());
        Ok(tape.forward(&inputs)?.data().to_vec())
    }

    /// Per-row losses for an `[M, head_channels]` feature matrix.
    pub fn per_step(&self, features: &Tensor) -> Result<Vec<f64>> {
        let want = self.arch.layout.head_channels();
        if features.rank() != 2 || features.shape()[1] != want {
            return Err(Error::Shape {
                node: 0,
                op: "loss_per_step",
                detail: alloc::format!("features {:?}, expected [_, {want}]", features.shape()),
            });
        }
        let mut g = Graph::new();
        let vars = self.declare(&mut g, false);
        let f = g.constant_input(features.shape());
        let out = vars.per_step(&mut g, f)?;
        let mut tape = g.finish(out);
        let mut inputs = Vec::with_capacity(11);
        self.feed(&mut inputs);
        inputs.push(features.clone());
        Ok(tape.forward(&inputs)?.data().to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

impl LossVars {
    /// conv → leaky ReLU → conv → leaky ReLU → flatten → dense: a `[1, 32]` row.
    pub fn context(&self, g: &mut Graph, buffer: Var) -> Result<Var> {
        let c1 = g.conv1d(buffer, self.conv1_w, self.conv1_b, CONV1_STRIDE)?;
        let a1 = g.leaky_relu(c1)?;
        let c2 = g.conv1d(a1, self.conv2_w, self.conv2_b, CONV2_STRIDE)?;
        let a2 = g.leaky_relu(c2)?;
        let flat_len = g.shape(a2).iter().product::<usize>();
        let flat = g.reshape(a2, &[1, flat_len])?;
        self.context.apply(g, flat)
    }

    /// Dense head over `[M, head_channels]` rows, returning a length-M vector.
    pub fn per_step(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let h = self.hidden.apply(g, features)?;
        let a = g.leaky_relu(h)?;
        let o = self.out.apply(g, a)?;
        let rows = g.shape(o)[0];
        g.reshape(o, &[rows])
    }
}

/// Human-readable layout descriptor for checkpoint headers.
pub fn describe_layout(layout: &FeatureLayout) -> String {
    let mut s = String::new();
    for (i, (k, w)) in layout.groups().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(k.name());
        s.push(':');
        s.push_str(&alloc::format!("{w}"));
    }
    s
}
