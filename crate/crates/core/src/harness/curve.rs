//! Support risk against hypothesis-set size.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::format::fmt_f64;
use crate::bounds::{finite_hypothesis_complexity, Loss};
use crate::error::{Error, Result};
use crate::select::{support_losses, HypothesisSet};
use crate::taskgen::Example;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Prefix size.
    pub m: usize,
    /// Lowest support risk among the first `m` rows.
    pub best_r: f64,
    pub complexity: f64,
    pub bound: f64,
}

/// Points at `m = stride, 2 stride, ...`, always ending at the full set.
pub fn curve_from_losses(losses: &[f64], n: usize, epsilon: f64, c: f64, stride: usize) -> Result<Vec<CurvePoint>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if losses.is_empty() {
        return Err(Error::invalid("learning curve of an empty hypothesis set"));
    }
    let mut out = Vec::new();
    let mut best = f64::INFINITY;
    for (i, &l) in losses.iter().enumerate() {
        best = best.min(l);
        let m = i + 1;
        if m % stride == 0 || m == losses.len() {
            let complexity = finite_hypothesis_complexity(m as u64, n, epsilon, c)?;
            out.push(CurvePoint {
                m,
                best_r: best,
                complexity,
                bound: best + complexity,
            });
        }
    }
    Ok(out)
}

/// Curve over the rows of `hyp` in their stored order.
pub fn learning_curve(
    hyp: &HypothesisSet,
    support: &[Example],
    k: usize,
    loss: Loss,
    epsilon: f64,
    stride: usize,
) -> Result<Vec<CurvePoint>> {
    let losses = support_losses(hyp, support, k, loss)?;
    curve_from_losses(&losses, support.len(), epsilon, loss.max_value(), stride)
}

/// Point with the lowest bound; ties go to the smallest `m`.
pub fn best_prefix(curve: &[CurvePoint]) -> Option<&CurvePoint> {
    curve.iter().fold(None, |acc: Option<&CurvePoint>, p| match acc {
        Some(a) if a.bound <= p.bound => Some(a),
        _ => Some(p),
    })
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("m,best_r,complexity,bound\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.m,
            fmt_f64(p.best_r),
            fmt_f64(p.complexity),
            fmt_f64(p.bound)
        );
    }
    s
}
