//! Central finite-difference checks for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative error used by the checks: |a − n| / max(|a|, |n|, floor).
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`. `coords` limits the check to the given
/// (input, element) pairs; `None` checks every element.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64, floor: f64, coords: Option<&[(usize, usize)]>) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let sum = tape.sum(out);
        Ok(tape.value(sum).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let root = tape.sum(out);
    let grads = tape.backward(root);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for &(i, e) in coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[e]);
        let x0 = work[i].data()[e];
        work[i].data_mut()[e] = x0 + h;
        let fp = eval(&work)?;
        work[i].data_mut()[e] = x0 - h;
        let fm = eval(&work)?;
        work[i].data_mut()[e] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic, numeric, floor));
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked: coords.len(),
    })
}
