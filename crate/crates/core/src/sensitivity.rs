//! Gradient magnitude of one per-step loss with respect to every buffer
//! input, split into the direct head path and the context path.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nets::{ChannelKind, LossParams};

/// Raw input gradients of `L_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGradients {
    /// `L_t` itself.
    pub value: f64,
    /// Buffer row holding step `t`.
    pub row: usize,
    /// `∂L_t/∂buffer` through the context vector, `[N, channels]`.
    pub context: Tensor,
    /// `∂L_t/∂x_t` through the head's own input row, `[channels]`.
    pub direct: Vec<f64>,
}

impl InputGradients {
    /// Total derivative with respect to buffer entry `(i, c)`; row `t`
    /// feeds both paths.
    pub fn total(&self, i: usize, c: usize) -> f64 {
        let g = self.context.row(i)[c];
        if i == self.row {
            g + self.direct[c]
        } else {
            g
        }
    }
}

/// One output line: `kind` is the channel name, prefixed with `direct_`
/// for the head path at the evaluated step.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRow {
    pub timestep: usize,
    pub kind: String,
    pub grad_norm: f64,
}

/// Gradients of the head output at window step `t` (0-based within the
/// last `window` buffer rows), treating the buffer row as the head input.
pub fn input_gradients(loss: &LossParams, buffer: &Tensor, window: usize, t: usize) -> Result<InputGradients> {
    let arch = loss.arch();
    let n = arch.buffer_len;
    let channels = arch.layout.buffer_channels();
    if buffer.shape() != [n, channels] {
        return Err(Error::Dimension {
            what: "buffer rows",
            expected: n,
            found: buffer.shape().first().copied().unwrap_or(0),
        });
    }
    if window == 0 || window > n {
        return Err(Error::OutOfRange { what: "head window", value: window as f64 });
    }
    if t >= window {
        return Err(Error::OutOfRange { what: "step index within head window", value: t as f64 });
    }
    let row = n - window + t;

    let mut g = Graph::new();
    let vars = loss.embed(&mut g);
    let buf = g.input(&[n, channels]);
    let x = g.input(&[1, channels]);
    let ctx = vars.context(&mut g, buf)?;
    let feats = g.concat_cols(&[x, ctx])?;
    let out = vars.per_step(&mut g, feats)?;
    let total = g.sum(out)?;
    let mut tape = g.finish(total);
    let x_t = Tensor::matrix(1, channels, buffer.row(row).to_vec())?;
    let value = tape.forward(&[buffer.clone(), x_t])?.data()[0];
    let grads = tape.backward(&Tensor::scalar(1.0))?;
    Ok(InputGradients {
        value,
        row,
        context: grads.get(0).expect("buffer differentiable").clone(),
        direct: grads.get(1).expect("row differentiable").data().to_vec(),
    })
}

/// Per-timestep, per-channel-group L2 norms of `∂L_t/∂x_i`: context-path
/// rows for every buffer step, then direct-path rows for step `t`.
/// Timesteps count buffer rows from 0 (oldest).
pub fn analyze(
    loss: &LossParams,
    buffer: &Tensor,
    window: usize,
    t: usize,
) -> Result<(InputGradients, Vec<SensitivityRow>)> {
    let grads = input_gradients(loss, buffer, window, t)?;
    let layout = loss.arch().layout;
    let groups: Vec<(ChannelKind, core::ops::Range<usize>)> =
        layout.groups().into_iter().map(|(k, _)| (k, layout.range(k).expect("buffer group"))).collect();
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let mut rows = Vec::with_capacity(loss.arch().buffer_len * groups.len() + groups.len());
    for i in 0..loss.arch().buffer_len {
        let r = grads.context.row(i);
        for (k, range) in &groups {
            rows.push(SensitivityRow { timestep: i, kind: String::from(k.name()), grad_norm: norm(&r[range.clone()]) });
        }
    }
    for (k, range) in &groups {
        let mut kind = String::from("direct_");
        kind.push_str(k.name());
        rows.push(SensitivityRow { timestep: grads.row, kind, grad_norm: norm(&grads.direct[range.clone()]) });
    }
    Ok((grads, rows))
}

/// True when every reported norm is exactly zero.
pub fn zero_rows(rows: &[SensitivityRow]) -> bool {
    rows.iter().all(|r| r.grad_norm == 0.0)
}

/// Central-difference estimate of `∂L_t/∂buffer[i, c]`.
pub fn finite_difference(
    loss: &LossParams,
    buffer: &Tensor,
    window: usize,
    t: usize,
    i: usize,
    c: usize,
    step: f64,
) -> Result<f64> {
    let eval = |b: &Tensor| -> Result<f64> { Ok(input_gradients(loss, b, window, t)?.value) };
    let mut probe = buffer.clone();
    let idx = i * buffer.cols() + c;
    let orig = probe.data()[idx];
    probe.data_mut()[idx] = orig + step;
    let up = eval(&probe)?;
    probe.data_mut()[idx] = orig - step;
    let down = eval(&probe)?;
    Ok((up - down) / (2.0 * step))
}

/// Zero buffer of the loss's shape.
pub fn empty_buffer(loss: &LossParams) -> Tensor {
    let a = loss.arch();
    Tensor::zeros(&[a.buffer_len, a.layout.buffer_channels()])
}
