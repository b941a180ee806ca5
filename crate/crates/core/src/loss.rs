//! Softmax cross-entropy on logits and its gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-entropy in nats. Always nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LossValue(f64);

impl LossValue {
    pub fn new(value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Contract(format!("loss must be finite and >= 0, got {value}")));
        }
        Ok(LossValue(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Max-shifted softmax. Total on finite nonempty input.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_label(z: &[f64], y: usize) -> Result<()> {
    if y >= z.len() {
        return Err(Error::Index { index: y, len: z.len() });
    }
    Ok(())
}

/// `-log softmax(z)[y]`
pub fn cross_entropy(z: &[f64], y: usize) -> Result<LossValue> {
    check_label(z, y)?;
    // logsumexp >= max >= z[y], so rounding is the only way below zero.
    Ok(LossValue((log_sum_exp(z) - z[y]).max(0.0)))
}

/// `softmax(z) - onehot(y)`: the vanilla logit gradient.
pub fn grad_cross_entropy(z: &[f64], y: usize) -> Result<Vec<f64>> {
    check_label(z, y)?;
    let mut g = softmax(z);
    g[y] -= 1.0;
    Ok(g)
}

/// Cross-entropy against a target distribution: `-Σ p_j log softmax(z)_j`.
pub fn soft_cross_entropy(z: &[f64], target: &[f64]) -> Result<f64> {
    if z.len() != target.len() {
        return Err(Error::dim("soft_cross_entropy", z.len(), target.len()));
    }
    let lse = log_sum_exp(z);
    Ok(target.iter().zip(z).map(|(p, v)| -p * (v - lse)).sum())
}

/// Gradient of [`soft_cross_entropy`] w.r.t. the logits for a target that sums
/// to one: `softmax(z) - target`.
pub fn grad_soft_cross_entropy(z: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if z.len() != target.len() {
        return Err(Error::dim("grad_soft_cross_entropy", z.len(), target.len()));
    }
    let mut g = softmax(z);
    g.iter_mut().zip(target).for_each(|(a, p)| *a -= p);
    Ok(g)
}

fn check_mask(z: &[f64], mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::Contract("empty class mask".into()));
    }
    if let Some(&c) = mask.iter().find(|&&c| c >= z.len()) {
        return Err(Error::Index { index: c, len: z.len() });
    }
    Ok(())
}

/// Softmax over the classes in `mask` (all classes for `None`), zero on the
/// rest.
pub fn masked_softmax(z: &[f64], mask: Option<&[usize]>) -> Result<Vec<f64>> {
    let Some(mask) = mask else {
        return Ok(softmax(z));
    };
    check_mask(z, mask)?;
    let local: Vec<f64> = mask.iter().map(|&c| z[c]).collect();
    let mut out = vec![0.0; z.len()];
    for (&c, p) in mask.iter().zip(softmax(&local)) {
        out[c] = p;
    }
    Ok(out)
}

/// Cross-entropy restricted to the classes in `mask`; `y` must be one of them.
pub fn masked_cross_entropy(z: &[f64], y: usize, mask: Option<&[usize]>) -> Result<LossValue> {
    let Some(mask) = mask else {
        return cross_entropy(z, y);
    };
    check_mask(z, mask)?;
    let pos = mask
        .iter()
        .position(|&c| c == y)
        .ok_or_else(|| Error::Contract(format!("label {y} outside the class mask")))?;
    let local: Vec<f64> = mask.iter().map(|&c| z[c]).collect();
    cross_entropy(&local, pos)
}

/// Gradient of [`masked_cross_entropy`] w.r.t. the full logit vector; zero
/// outside the mask.
pub fn masked_grad_cross_entropy(z: &[f64], y: usize, mask: Option<&[usize]>) -> Result<Vec<f64>> {
    let Some(m) = mask else {
        return grad_cross_entropy(z, y);
    };
    if !m.contains(&y) {
        return Err(Error::Contract(format!("label {y} outside the class mask")));
    }
    let mut g = masked_softmax(z, mask)?;
    g[y] -= 1.0;
    Ok(g)
}

/// Zeroes the entries outside `mask`.
pub fn apply_mask(v: &mut [f64], mask: Option<&[usize]>) {
    if let Some(mask) = mask {
        for (i, x) in v.iter_mut().enumerate() {
            if !mask.contains(&i) {
                *x = 0.0;
            }
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_does_not_overflow() {
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        for k in 2..12 {
            let z = vec![0.25; k];
            let l = cross_entropy(&z, k - 1).unwrap().value();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_dominant_logit_tends_to_zero() {
        let l = cross_entropy(&[0.0, 60.0, 0.0], 1).unwrap().value();
        assert!(l < 1e-25);
    }

    #[test]
    fn cross_entropy_matches_high_precision_value() {
        // ln(e^1 + e^2 + e^3) - 3 at 40 digits.
        let expected = 0.407_605_964_444_380_3;
        let l = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap().value();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(Error::Index { index: 2, len: 2 })));
        assert!(grad_cross_entropy(&[0.0], 5).is_err());
    }

    #[test]
    fn gradient_two_class_symmetric() {
        assert_eq!(grad_cross_entropy(&[0.0, 0.0], 0).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let y = 2;
        let g = grad_cross_entropy(&z, y).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fd = (cross_entropy(&zp, y).unwrap().value() - cross_entropy(&zm, y).unwrap().value())
                / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
            assert!(rel < 1e-6, "component {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[2.0, 1.0, 3.0]), 2);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn masked_loss_matches_restricted_vector() {
        let z = [0.5, 3.0, -1.0, 2.0];
        let mask = [0usize, 2, 3];
        let local = [0.5, -1.0, 2.0];
        let a = masked_cross_entropy(&z, 3, Some(&mask)).unwrap().value();
        assert_eq!(a, cross_entropy(&local, 2).unwrap().value());
        let g = masked_grad_cross_entropy(&z, 3, Some(&mask)).unwrap();
        let gl = grad_cross_entropy(&local, 2).unwrap();
        assert_eq!(g, vec![gl[0], 0.0, gl[1], gl[2]]);
        assert!(masked_cross_entropy(&z, 1, Some(&mask)).is_err());
        assert!(masked_softmax(&z, Some(&[7])).is_err());
        assert_eq!(masked_grad_cross_entropy(&z, 1, None).unwrap(), grad_cross_entropy(&z, 1).unwrap());
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        let z = [0.3, -0.7, 1.1, 0.2, -0.4];
        let mask = [1usize, 2, 4];
        let g = masked_grad_cross_entropy(&z, 2, Some(&mask)).unwrap();
        for i in 0..z.len() {
            let (mut up, mut down) = (z, z);
            up[i] += 1e-6;
            down[i] -= 1e-6;
            let fd = (masked_cross_entropy(&up, 2, Some(&mask)).unwrap().value()
                - masked_cross_entropy(&down, 2, Some(&mask)).unwrap().value())
                / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_on_the_simplex(z in prop::collection::vec(-50.0f64..50.0, 1..16)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 1..10), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn gradient_sums_to_zero(z in prop::collection::vec(-30.0f64..30.0, 2..12), y in 0usize..64) {
            let y = y % z.len();
            let g = grad_cross_entropy(&z, y).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
