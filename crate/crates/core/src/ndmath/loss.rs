//! Binary and categorical cross-entropy.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-[y log p + (1-y) log(1-p)]` with `p` clamped.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d(bce)/dp with `p` clamped. When `p` comes out of a sigmoid, prefer
/// feeding `p - y` to the pre-activation directly; it does not vanish when the
/// sigmoid saturates.
pub fn bce_output_grad(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -y / p + (1.0 - y) / (1.0 - p)
}

/// `-log probs[label]` with the probability clamped.
pub fn cce_loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    Ok(-clamp_prob(*p).ln())
}

/// Gradient of softmax cross-entropy w.r.t. the logits: `probs - one_hot(label)`.
pub fn cce_logit_grad(probs: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let confident = bce_loss(1.0 - 1e-7, 1.0);
        assert!((confident - 1e-7).abs() < 1e-12, "{confident}");
        // -ln 0.8
        assert!((bce_loss(0.2, 0.0) - 0.223_143_551_314_209_76).abs() < 1e-15);
        assert!(bce_loss(0.0, 1.0).is_finite());
        assert!(bce_loss(1.0, 0.0).is_finite());
    }

    #[test]
    fn bce_grad_matches_finite_difference() {
        for &(p, y) in &[(0.3, 1.0), (0.7, 0.0), (0.5, 1.0)] {
            let h = 1e-6;
            let fd = (bce_loss(p + h, y) - bce_loss(p - h, y)) / (2.0 * h);
            assert!((fd - bce_output_grad(p, y)).abs() < 1e-6);
        }
    }

    #[test]
    fn cce_examples() {
        let uniform = vec![1.0 / 11.0; 11];
        for label in 0..11 {
            assert!((cce_loss(&uniform, label).unwrap() - 11f64.ln()).abs() < 1e-12);
        }
        let onehot = [0.0, 1.0, 0.0];
        assert!(cce_loss(&onehot, 1).unwrap() < 1e-6);
        assert_eq!(cce_logit_grad(&onehot, 1).unwrap(), vec![0.0, 0.0, 0.0]);

        let probs = [0.7, 0.2, 0.1];
        assert!((cce_loss(&probs, 1).unwrap() - 1.609_437_912_434_100_4).abs() < 1e-12);
        let g = cce_logit_grad(&probs, 1).unwrap();
        for (a, b) in g.iter().zip([0.7, -0.8, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cce_label_out_of_range() {
        assert!(matches!(
            cce_loss(&[0.5, 0.5], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(cce_logit_grad(&[1.0], 3).is_err());
    }
}
