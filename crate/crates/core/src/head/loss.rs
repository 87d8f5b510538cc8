//! Bradley-Terry pairwise loss.
//!
//! For `Δ = f(preferred) − f(dispreferred)` the loss is `−ln σ(Δ) =
//! ln(1 + e^{−Δ})`, evaluated in a form that never overflows.

use super::{HeadError, HeadParameters, RewardHead};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and `dloss/dΔ` for one pair.
pub fn pair_loss_from_delta(delta: f64) -> Result<(f64, f64), HeadError> {
    let loss = softplus(-delta);
    if !loss.is_finite() {
        return Err(HeadError::NonFiniteLoss { delta });
    }
    Ok((loss, -sigmoid(-delta)))
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub delta: f64,
    pub grads: HeadParameters,
}

/// Loss of one comparison pair and its gradient with respect to every
/// parameter, using eval-mode forward passes.
pub fn pair_loss(
    head: &RewardHead,
    preferred: &[f64],
    dispreferred: &[f64],
) -> Result<PairLoss, HeadError> {
    let d = head.input_dim();
    for found in [preferred.len(), dispreferred.len()] {
        if found != d {
            return Err(HeadError::DimensionMismatch { expected: d, found });
        }
    }
    let mut x = Vec::with_capacity(2 * d);
    x.extend_from_slice(preferred);
    x.extend_from_slice(dispreferred);
    let (out, cache) = head.forward_batch(x, None, true)?;
    let delta = out[0] - out[1];
    let (loss, g) = pair_loss_from_delta(delta)?;
    let mut grads = HeadParameters::zeros(head.architecture());
    head.backward_batch(&cache.expect("cache requested"), &[g, -g], &mut grads);
    Ok(PairLoss { loss, delta, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((pair_loss_from_delta(0.0).unwrap().0 - ln2).abs() < 1e-12);
        let (l, _) = pair_loss_from_delta(-(3.0f64).ln()).unwrap();
        assert!((l - (4.0f64).ln()).abs() < 1e-12);
        for d in [-50.0, 50.0, -800.0, 800.0] {
            let (l, g) = pair_loss_from_delta(d).unwrap();
            assert!(l.is_finite() && l >= 0.0 && g.is_finite(), "{d}");
        }
        assert!(pair_loss_from_delta(f64::NAN).is_err());
    }

    #[test]
    fn symmetric_pair_sum() {
        let ln2 = std::f64::consts::LN_2;
        for d in [0.0, 0.3, -1.7, 12.0] {
            let s = pair_loss_from_delta(d).unwrap().0 + pair_loss_from_delta(-d).unwrap().0;
            if d == 0.0 {
                assert!((s - 2.0 * ln2).abs() < 1e-15);
            } else {
                assert!(s > 2.0 * ln2);
            }
        }
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        for d in [-3.0, -0.1, 0.0, 0.7, 5.0] {
            let h = 1e-6;
            let fd = (softplus(-(d + h)) - softplus(-(d - h))) / (2.0 * h);
            let (_, g) = pair_loss_from_delta(d).unwrap();
            assert!((fd - g).abs() < 1e-8, "{d}: {fd} vs {g}");
        }
    }
}
