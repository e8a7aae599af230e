//! Vector norms and Euclidean projection onto norm balls.
//!
//! The attack measures perturbation size with one of three norms and, after
//! every step, projects the perturbation back onto the ball of radius
//! `beta`. Projections are exact minimizers of the Euclidean distance:
//! componentwise clamping for L-infinity, radial scaling for L2, and the
//! sort-based soft-threshold construction for L1.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;

/// Which norm measures the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NormKind {
    L1,
    L2,
    LInf,
}

impl NormKind {
    pub const ALL: [NormKind; 3] = [NormKind::L1, NormKind::L2, NormKind::LInf];

    /// Lowercase token used in CLI arguments and CSV columns.
    pub fn label(self) -> &'static str {
        match self {
            NormKind::L1 => "l1",
            NormKind::L2 => "l2",
            NormKind::LInf => "linf",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(NormKind::L1),
            "l2" => Ok(NormKind::L2),
            "linf" => Ok(NormKind::LInf),
            other => Err(Error::Parameter(format!(
                "unknown norm {other:?} (expected l1, l2, or linf)"
            ))),
        }
    }
}

/// Norm of a value buffer. The empty buffer has norm 0 under every kind.
pub fn norm(values: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::L1 => values.iter().map(|v| v.abs()).sum(),
        NormKind::L2 => values.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NormKind::LInf => values.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
    }
}

/// Norm of the pixelwise difference `x - y`. Shapes must match.
pub fn distance(x: &Image, y: &Image, kind: NormKind) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Parameter(format!(
            "cannot take a distance between shapes {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let diff: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
    Ok(norm(&diff, kind))
}

/// Projects `delta` onto the closed ball `{v : norm(v, kind) <= beta}`,
/// minimizing Euclidean distance to the input.
///
/// Vectors already inside the ball (with a hair of relative slack, so the
/// projection is exactly idempotent) come back unchanged.
pub fn project_to_ball(delta: &[f64], kind: NormKind, beta: f64) -> Result<Vec<f64>> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Parameter(format!(
            "projection radius must be finite and nonnegative, got {beta}"
        )));
    }
    let current = norm(delta, kind);
    if current <= beta * (1.0 + 1e-11) {
        return Ok(delta.to_vec());
    }
    let projected = match kind {
        NormKind::LInf => delta.iter().map(|v| v.clamp(-beta, beta)).collect(),
        NormKind::L2 => {
            // current > beta >= 0, so the scale is well defined.
            let scale = beta / current;
            delta.iter().map(|v| v * scale).collect()
        }
        NormKind::L1 => project_l1(delta, beta),
    };
    Ok(projected)
}

/// Sort-based projection onto the L1 ball of radius `beta`.
///
/// Sorts |delta| descending, finds the largest prefix whose entries stay
/// above the running threshold `(prefix_sum - beta) / count`, and
/// soft-thresholds every component by the final threshold, keeping signs.
/// Only called when `norm(delta, L1) > beta`.
fn project_l1(delta: &[f64], beta: f64) -> Vec<f64> {
    let mut mags: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
    mags.sort_unstable_by(|a, b| b.partial_cmp(a).expect("magnitudes are finite"));
    let mut prefix = 0.0;
    let mut theta = 0.0;
    let mut any = false;
    for (j, &u) in mags.iter().enumerate() {
        prefix += u;
        let t = (prefix - beta) / (j + 1) as f64;
        if u > t {
            theta = t;
            any = true;
        } else {
            break;
        }
    }
    if !any {
        // Happens only for beta = 0: everything shrinks to the origin.
        return vec![0.0; delta.len()];
    }
    delta
        .iter()
        .map(|&v| {
            let shrunk = (v.abs() - theta).max(0.0);
            if v < 0.0 {
                -shrunk
            } else {
                shrunk
            }
        })
        .collect()
}
