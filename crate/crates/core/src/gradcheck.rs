//! Central finite-difference check of tape gradients at `f64`.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Outcome for one input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`; zero when both vanish.
    pub rel: f64,
    pub norm_tape: f64,
    pub norm_fd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub inputs: Vec<InputCheck>,
}

impl GradCheck {
    pub fn max_rel(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel).fold(0.0, f64::max)
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid("gradcheck", format!("loss has shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences
/// of step `h`, input by input. `differentiable[i] = false` skips input `i`
/// (labels-like constants, or inputs the function treats as fixed).
pub fn check<F>(inputs: &[Tensor<f64>], differentiable: &[bool], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if differentiable.len() != inputs.len() {
        return Err(Error::invalid("gradcheck", "one flag per input"));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = Vec::new();
    for (i, &d) in differentiable.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[i], inputs[i].shape());
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work, &f)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work, &f)?;
            work[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let norm_tape = norm(&mut analytic.data().iter().copied());
        let norm_fd = norm(&mut numeric.iter().copied());
        let diff = norm(&mut analytic.data().iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm_tape.max(norm_fd);
        report.push(InputCheck {
            rel: if scale == 0.0 { 0.0 } else { diff / scale },
            norm_tape,
            norm_fd,
        });
    }
    Ok(GradCheck { inputs: report })
}
