//! Central finite differences against the reverse sweep.

use super::graph::{backward, forward_loss, Example};
use crate::encoder::SetEncoder;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Each coordinate's error is measured against at least this fraction of
/// the largest analytic gradient component. Central differences of
/// coordinates far below that scale are dominated by rounding in the loss.
pub const GRADIENT_SCALE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// An argmax, merge winner or ReLU pattern changes inside the
    /// difference stencil, so the loss has a kink here.
    pub non_differentiable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    fn checked(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.coordinates.iter().filter(|c| !c.non_differentiable)
    }

    /// Largest relative error over differentiable coordinates.
    pub fn max_rel_error(&self) -> f64 {
        self.checked().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> Vec<&CoordinateCheck> {
        self.coordinates.iter().filter(|c| c.non_differentiable).collect()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    /// The `n` differentiable coordinates with the largest relative error.
    pub fn worst(&self, n: usize) -> Vec<&CoordinateCheck> {
        let mut all: Vec<&CoordinateCheck> = self.checked().collect();
        all.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error).then(a.index.cmp(&b.index)));
        all.truncate(n);
        all
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe<T: Scalar>(encoder: &mut SetEncoder<T>, flat: &[T], examples: &[Example<T>]) -> Result<(f64, Vec<usize>)> {
    encoder.set_flat_params(flat)?;
    let g = forward_loss(encoder, examples)?;
    Ok((g.loss_value().to_f64_lossy(), g.tape.selection_signature()))
}

/// Compares every parameter's reverse-mode gradient with a central
/// difference of width `2 * step`.
pub fn grad_check<T: Scalar>(encoder: &SetEncoder<T>, examples: &[Example<T>], step: f64, tolerance: f64) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {step}")));
    }
    let graph = forward_loss(encoder, examples)?;
    let analytic = backward(&graph)?;
    let base_sig = graph.tape.selection_signature();
    let floor = GRADIENT_SCALE_FLOOR * analytic.iter().map(|g| g.to_f64_lossy().abs()).fold(0.0, f64::max);
    let names: Vec<(String, usize)> = encoder.parameters().into_iter().map(|(n, m)| (n, m.len())).collect();
    let flat = encoder.flat_params();
    let mut work = encoder.clone();
    let mut coordinates = Vec::with_capacity(flat.len());
    let mut name_iter = names.iter().flat_map(|(n, len)| (0..*len).map(move |i| format!("{n}[{i}]")));
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] = T::of(flat[i].to_f64_lossy() + step);
        let mut minus = flat.clone();
        minus[i] = T::of(flat[i].to_f64_lossy() - step);
        let (lp, sp) = probe(&mut work, &plus, examples)?;
        let (lm, sm) = probe(&mut work, &minus, examples)?;
        let width = plus[i].to_f64_lossy() - minus[i].to_f64_lossy();
        let numeric = (lp - lm) / width;
        let a = analytic[i].to_f64_lossy();
        coordinates.push(CoordinateCheck {
            index: i,
            name: name_iter.next().unwrap_or_default(),
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, floor),
            non_differentiable: sp != base_sig || sm != base_sig,
        });
    }
    Ok(GradCheckReport { step, tolerance, coordinates })
}
