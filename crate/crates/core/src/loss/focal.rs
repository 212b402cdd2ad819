use super::{sigmoid, softplus, ClassLogits};
use crate::error::LossError;

fn check_target(logits: &ClassLogits, target: Option<usize>) -> Result<(), LossError> {
    match target {
        Some(class) if class >= logits.classes() => Err(LossError::ClassOutOfRange {
            class,
            classes: logits.classes(),
        }),
        _ => Ok(()),
    }
}

/// Sigmoid focal loss summed over classes. `target = None` is background
/// (all-zero one-hot).
pub fn focal_loss(
    logits: &ClassLogits,
    target: Option<usize>,
    alpha: f64,
    gamma: f64,
) -> Result<f64, LossError> {
    check_target(logits, target)?;
    Ok(logits
        .0
        .iter()
        .enumerate()
        .map(|(c, &x)| term(x, target == Some(c), alpha, gamma).0)
        .sum())
}

/// Focal loss and its gradient w.r.t. each logit.
pub fn focal_loss_grad(
    logits: &ClassLogits,
    target: Option<usize>,
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    check_target(logits, target)?;
    let mut total = 0.0;
    let grad = logits
        .0
        .iter()
        .enumerate()
        .map(|(c, &x)| {
            let (l, g) = term(x, target == Some(c), alpha, gamma);
            total += l;
            g
        })
        .collect();
    Ok((total, grad))
}

// Positive: -a (1-p)^g log p.   Negative: -(1-a) p^g log(1-p).
fn term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let q = sigmoid(-x);
    if positive {
        let w = alpha * q.powf(gamma);
        let nll = softplus(-x);
        (w * nll, w * (-gamma * p * nll - q))
    } else {
        let w = (1.0 - alpha) * p.powf(gamma);
        let nll = softplus(x);
        (w * nll, w * (gamma * q * nll + p))
    }
}
