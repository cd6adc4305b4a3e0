//! Central finite-difference verification of tape gradients.
//!
//! The check only evaluates the loss forward, never the tape's backward
//! pass, so it is an independent route to the same derivative.

use super::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Relative error with a floor on the denominator. The floor guards
/// finite-difference roundoff on near-zero components: an entry whose
/// true gradient is ~0 would otherwise compare FD noise against itself.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Perturb every entry of every buffer by ±h, re-evaluate `loss`, and
/// return the worst relative error against the analytic gradients.
/// `analytic[k]` corresponds to `bufs[k]`.
pub fn fd_check_loss(
    mut bufs: Vec<&mut Vec<f64>>,
    analytic: &[Tensor],
    h: f64,
    mut loss: impl FnMut(&[&[f64]]) -> f64,
) -> f64 {
    let gmax = analytic
        .iter()
        .flat_map(|t| t.data())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let floor = (1e-3 * gmax).max(1e-8);
    let mut max_err = 0.0f64;
    for k in 0..bufs.len() {
        for i in 0..bufs[k].len() {
            let orig = bufs[k][i];
            bufs[k][i] = orig + h;
            let fp = eval(&bufs, &mut loss);
            bufs[k][i] = orig - h;
            let fm = eval(&bufs, &mut loss);
            bufs[k][i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_err(fd, analytic[k].data()[i], floor));
        }
    }
    max_err
}

/// Same check restricted to sampled entries of a single buffer, for
/// large parameter groups where perturbing everything is wasteful.
pub fn fd_check_sampled(
    buf: &mut [f64],
    entries: &[usize],
    analytic: &[f64],
    gmax: f64,
    h: f64,
    mut loss: impl FnMut() -> f64,
) -> f64 {
    let floor = (1e-3 * gmax).max(1e-8);
    let mut max_err = 0.0f64;
    for &i in entries {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = loss();
        buf[i] = orig - h;
        let fm = loss();
        buf[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        max_err = max_err.max(rel_err(fd, analytic[i], floor));
    }
    max_err
}

fn eval(bufs: &[&mut Vec<f64>], loss: &mut impl FnMut(&[&[f64]]) -> f64) -> f64 {
    let views: Vec<&[f64]> = bufs.iter().map(|b| b.as_slice()).collect();
    loss(&views)
}
