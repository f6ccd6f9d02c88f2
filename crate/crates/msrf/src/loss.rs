//! Segmentation losses, composed from tape primitives so they are
//! differentiable end to end.

use crate::error::{Error, Result};
use crate::network::NetOutputs;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Predictions are clamped to `[EPS, 1-EPS]` before the logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0, alpha: 1.0, beta1: 1.0, beta2: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("loss weight {name}={v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Which terms the combined loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombinedMode {
    Both,
    BceOnly,
    DiceOnly,
}

impl CombinedMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(CombinedMode::Both),
            "bce_only" => Ok(CombinedMode::BceOnly),
            "dice_only" => Ok(CombinedMode::DiceOnly),
            other => Err(Error::config(format!("unknown loss mode `{}`", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CombinedMode::Both => "both",
            CombinedMode::BceOnly => "bce_only",
            CombinedMode::DiceOnly => "dice_only",
        }
    }
}

fn check_shapes(tape: &Tape, yhat: Var, y: &Tensor, what: &str) -> Result<()> {
    if tape.value(yhat).shape != y.shape {
        return Err(Error::shape(format!(
            "{} target shape {:?} does not match prediction {:?}",
            what,
            y.shape,
            tape.value(yhat).shape
        )));
    }
    Ok(())
}

/// Binary cross-entropy, mean over all pixels:
/// `(y-1)·log(1-ŷ) - y·log ŷ` with the prediction clamped away from 0/1.
pub fn bce_loss(tape: &mut Tape, yhat: Var, y: &Tensor) -> Result<Var> {
    check_shapes(tape, yhat, y, "bce")?;
    let y_minus_1 = tape.constant(Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().map(|&v| v - 1.0).collect(),
    });
    let y_t = tape.constant(y.clone());
    let clamped = tape.clamp(yhat, BCE_EPS, 1.0 - BCE_EPS);
    let one_minus = tape.one_minus(clamped);
    let ln_one_minus = tape.ln(one_minus);
    let ln_p = tape.ln(clamped);
    let t1 = tape.hadamard(y_minus_1, ln_one_minus)?;
    let t2 = tape.hadamard(y_t, ln_p)?;
    let pointwise = tape.sub(t1, t2)?;
    Ok(tape.mean_all(pointwise))
}

/// Dice loss `1 - (2·Σyŷ + 1) / (Σy + Σŷ + 1)`, computed per batch element
/// and averaged (the smooth constant applies per image).
pub fn dice_loss(tape: &mut Tape, yhat: Var, y: &Tensor) -> Result<Var> {
    check_shapes(tape, yhat, y, "dice")?;
    let y_t = tape.constant(y.clone());
    let prod = tape.hadamard(yhat, y_t)?;
    let inter = tape.sum_per_image(prod)?;
    let sum_pred = tape.sum_per_image(yhat)?;
    let sum_true = tape.sum_per_image(y_t)?;
    let num_2 = tape.mul_const(inter, 2.0);
    let num = tape.add_const(num_2, 1.0);
    let den_sum = tape.add(sum_pred, sum_true)?;
    let den = tape.add_const(den_sum, 1.0);
    let ratio = tape.div(num, den)?;
    let per_image = tape.one_minus(ratio);
    Ok(tape.mean_all(per_image))
}

/// `λ1·BCE + λ2·Dice`, or a single term in the ablation modes.
pub fn combined_loss(
    tape: &mut Tape,
    yhat: Var,
    y: &Tensor,
    lambda1: f64,
    lambda2: f64,
    mode: CombinedMode,
) -> Result<Var> {
    match mode {
        CombinedMode::Both => {
            let bce = bce_loss(tape, yhat, y)?;
            let dice = dice_loss(tape, yhat, y)?;
            let b = tape.mul_const(bce, lambda1);
            let d = tape.mul_const(dice, lambda2);
            tape.add(b, d)
        }
        CombinedMode::BceOnly => bce_loss(tape, yhat, y),
        CombinedMode::DiceOnly => dice_loss(tape, yhat, y),
    }
}

/// Deeply supervised total loss: the combined loss on the prediction and
/// both supervision heads, plus BCE between the edge map and the boundary
/// target. Terms vanish with their outputs (and with zero weights the
/// remaining objective matches the corresponding ablation row).
pub fn total_loss(
    tape: &mut Tape,
    outs: &NetOutputs,
    y: &Tensor,
    y_edge: &Tensor,
    weights: &LossWeights,
    mode: CombinedMode,
) -> Result<Var> {
    weights.validate()?;
    let main = combined_loss(tape, outs.pred, y, weights.lambda1, weights.lambda2, mode)?;
    let mut acc = tape.mul_const(main, weights.alpha);
    if let Some(ds0) = outs.ds0 {
        let l = combined_loss(tape, ds0, y, weights.lambda1, weights.lambda2, mode)?;
        let l = tape.mul_const(l, weights.beta1);
        acc = tape.add(acc, l)?;
    }
    if let Some(ds1) = outs.ds1 {
        let l = combined_loss(tape, ds1, y, weights.lambda1, weights.lambda2, mode)?;
        let l = tape.mul_const(l, weights.beta2);
        acc = tape.add(acc, l)?;
    }
    if let Some(edge) = outs.edge {
        let l = bce_loss(tape, edge, y_edge)?;
        let l = tape.mul_const(l, weights.gamma);
        acc = tape.add(acc, l)?;
    }
    Ok(acc)
}
