use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given step, returning the worst componentwise
/// relative error.
///
/// `build` receives a graph and the single input variable (shaped like
/// `point`) and returns the scalar output node.
pub fn check_gradient<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::OutOfRange { what: "finite-difference step", value: step });
    }
    let mut graph = Graph::new();
    let x = graph.input(point.shape());
    let y = build(&mut graph, x)?;
    let mut tape = graph.finish(y);

    let out_len = tape.forward(core::slice::from_ref(point))?.len();
    if out_len != 1 {
        return Err(Error::NotScalar { len: out_len });
    }
    let grads = tape.backward(&Tensor::scalar(1.0))?;
    let analytic = grads.get(0).expect("differentiable input").clone();

    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = scalar(tape.forward(core::slice::from_ref(&probe))?);
        probe.data_mut()[i] = orig - step;
        let down = scalar(tape.forward(core::slice::from_ref(&probe))?);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn scalar(t: &Tensor) -> f64 {
    t.data()[0]
}
