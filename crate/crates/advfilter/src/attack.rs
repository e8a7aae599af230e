//! Targeted, norm-budgeted iterative attack.
//!
//! Starting from the clean image, each iteration takes a steepest-descent
//! step on the targeted cross-entropy under the chosen norm's geometry,
//! projects the accumulated perturbation back onto the norm ball of radius
//! `beta`, clamps pixels to `[0, 1]`, and stops as soon as the classifier's
//! argmax reaches the target label. The whole procedure is deterministic:
//! there is no randomness in the loop.

use crate::classifier::{argmax, Classifier};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::norms::{norm, project_to_ball, NormKind};

/// Parameters of one attack run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub norm_kind: NormKind,
    /// Perturbation budget, in [0,1] pixel units. Must be positive.
    pub beta: f64,
    /// Step size. Must be positive.
    pub learning_rate: f64,
    /// Iteration cap. Must be at least 1.
    pub max_iterations: usize,
    pub target_label: usize,
}

impl AttackConfig {
    /// Config with the stock step size (0.01) and iteration cap (500).
    pub fn new(norm_kind: NormKind, beta: f64, target_label: usize) -> Self {
        Self { norm_kind, beta, learning_rate: 0.01, max_iterations: 500, target_label }
    }

    fn validate(&self, f: &Classifier) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Parameter(format!(
                "attack budget beta must be positive, got {}",
                self.beta
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Parameter(format!(
                "attack learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("attack needs at least 1 iteration".into()));
        }
        if self.target_label >= f.num_classes() {
            return Err(Error::Parameter(format!(
                "target label {} out of range for {} classes",
                self.target_label,
                f.num_classes()
            )));
        }
        Ok(())
    }
}

/// Outcome of one attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Image,
    /// Whether the classifier's argmax on `adversarial` is the target label.
    pub success: bool,
    pub iterations_used: usize,
    /// Norm (of the configured kind) of `adversarial - x_true`.
    pub final_perturbation_norm: f64,
    pub final_target_probability: f64,
    /// One `(loss, perturbation_norm)` entry per executed iteration,
    /// measured after the iteration's projection and clamp.
    pub trace: Vec<(f64, f64)>,
}

/// Steepest-descent direction for the given norm geometry, taken at the
/// current iterate `x` (pixels in [0, 1]).
fn step_direction(gradient: &[f64], x: &[f64], kind: NormKind) -> Vec<f64> {
    match kind {
        // Sign vector: the L-infinity steepest descent direction.
        NormKind::LInf => gradient
            .iter()
            .map(|&g| {
                if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect(),
        // Normalized gradient; a vanishing gradient yields a zero step.
        NormKind::L2 => {
            let n = norm(gradient, NormKind::L2);
            if n < 1e-12 {
                vec![0.0; gradient.len()]
            } else {
                gradient.iter().map(|&g| g / n).collect()
            }
        }
        // Single unit coordinate at the largest |g_i| (lowest index wins
        // ties), carrying that component's sign. The maximum is taken over
        // coordinates that can still move: a pixel already pinned to the
        // [0, 1] bound its step points into would make the whole iteration
        // a no-op, freezing the attack for every remaining iteration.
        NormKind::L1 => {
            let mut best: Option<usize> = None;
            for (i, &g) in gradient.iter().enumerate() {
                let movable = (g > 0.0 && x[i] > 0.0) || (g < 0.0 && x[i] < 1.0);
                if movable && best.is_none_or(|b| g.abs() > gradient[b].abs()) {
                    best = Some(i);
                }
            }
            let mut d = vec![0.0; gradient.len()];
            if let Some(best) = best {
                d[best] = if gradient[best] > 0.0 { 1.0 } else { -1.0 };
            }
            d
        }
    }
}

/// Crafts a targeted adversarial image within the configured norm budget.
///
/// The returned image always satisfies the budget (within 1e-6) and pixel
/// range [0, 1], whether or not the attack succeeded; `x_true` is never
/// modified.
pub fn craft(f: &Classifier, x_true: &Image, config: &AttackConfig) -> Result<AttackResult> {
    config.validate(f)?;
    if x_true.shape() != f.input_shape() {
        return Err(Error::Parameter(format!(
            "attack image shape {:?} does not match classifier input shape {:?}",
            x_true.shape(),
            f.input_shape()
        )));
    }
    let (h, w, c) = x_true.shape();
    let x0 = x_true.data();
    let mut x_adv = x0.to_vec();
    let mut acts = f.run_forward(&x_adv);
    let mut trace = Vec::new();
    let mut iterations_used = 0;
    let mut success = probs_of(&acts).map(|p| argmax(p) == config.target_label) == Some(true);

    if !success {
        let mut previous = x_adv.clone();
        for iteration in 1..=config.max_iterations {
            let gradient = f.input_gradient_from_acts(&acts, config.target_label);
            if let Some(pos) = gradient.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite input gradient (component {pos}) at iteration {iteration}"
                )));
            }
            let direction = step_direction(&gradient, &x_adv, config.norm_kind);
            // Descend the targeted loss, then pull the perturbation back
            // into the budget and the image back into [0, 1].
            for (x, d) in x_adv.iter_mut().zip(&direction) {
                *x -= config.learning_rate * d;
            }
            let delta: Vec<f64> = x_adv.iter().zip(x0).map(|(a, b)| a - b).collect();
            let delta = project_to_ball(&delta, config.norm_kind, config.beta)?;
            for ((x, &d), &orig) in x_adv.iter_mut().zip(&delta).zip(x0) {
                *x = (orig + d).clamp(0.0, 1.0);
            }

            acts = f.run_forward(&x_adv);
            let probs = probs_of(&acts).expect("forward always yields probabilities");
            let perturbation: Vec<f64> = x_adv.iter().zip(x0).map(|(a, b)| a - b).collect();
            let loss = -(probs[config.target_label].max(1e-12)).ln();
            trace.push((loss, norm(&perturbation, config.norm_kind)));
            iterations_used = iteration;
            if argmax(probs) == config.target_label {
                success = true;
                break;
            }
            // The iterate is a pure function of the previous image, so a
            // bitwise-unchanged image is a fixed point (the sign step is
            // undone by the projection/clamp every time); no later iteration
            // can differ, and the attack has failed.
            if x_adv == previous {
                break;
            }
            previous.clone_from(&x_adv);
        }
    }

    let probs = probs_of(&acts).expect("forward always yields probabilities");
    let perturbation: Vec<f64> = x_adv.iter().zip(x0).map(|(a, b)| a - b).collect();
    Ok(AttackResult {
        adversarial: Image::new(h, w, c, x_adv).expect("clamped pixels form a valid image"),
        success,
        iterations_used,
        final_perturbation_norm: norm(&perturbation, config.norm_kind),
        final_target_probability: probs[config.target_label],
        trace,
    })
}

fn probs_of(acts: &[Vec<f64>]) -> Option<&[f64]> {
    acts.last().map(Vec::as_slice)
}
