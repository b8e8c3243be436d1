//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error, with the relative error defined
    /// as |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    pub max_rel_error: f64,
    /// Coordinate index attaining `max_rel_error`.
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences with step `eps` (1e-6 is a reasonable default for losses of
/// order 1; use a larger step when the loss magnitude is larger).
///
/// `f` must build a scalar loss from the given tensor. A non-finite loss at
/// any probe point is reported as a numerical error naming the coordinate.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("grad_check eps must be positive, got {eps}")));
    }

    let mut g = Graph::new();
    let xid = g.leaf(x.to_vec(), shape, true)?;
    let loss = f(&mut g, xid)?;
    let l0 = g.item(loss)?;
    if !l0.is_finite() {
        return Err(Error::numerical(format!("loss is not finite at the base point: {l0}")));
    }
    g.backward(loss)?;
    let analytic = g
        .grad(xid)
        .ok_or_else(|| Error::contract("no gradient reached the checked tensor".to_string()))?
        .to_vec();

    let eval = |xs: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(xs, shape, false)?;
        let loss = f(&mut g, xid)?;
        g.item(loss)
    };

    let mut numeric = vec![0.0; x.len()];
    for c in 0..x.len() {
        let mut xp = x.to_vec();
        xp[c] += eps;
        let fp = eval(xp)?;
        let mut xm = x.to_vec();
        xm[c] -= eps;
        let fm = eval(xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss while probing coordinate {c}: f+={fp}, f-={fm}"
            )));
        }
        numeric[c] = (fp - fm) / (2.0 * eps);
    }

    let mut max_rel_error = 0.0;
    let mut worst_coordinate = 0;
    for c in 0..x.len() {
        let denom = (analytic[c].abs() + numeric[c].abs()).max(1e-8);
        let rel = (analytic[c] - numeric[c]).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_coordinate = c;
        }
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst_coordinate,
        analytic,
        numeric,
    })
}
