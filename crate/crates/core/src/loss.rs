//! Sigmoid cross-entropy over label logits.

use crate::error::{Error, Result};
use crate::layers::sigmoid_scalar;
use crate::tensor::Tensor;

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<usize> {
    let c = logits.len();
    if targets.len() != c || mask.len() != c {
        return Err(Error::shape(
            "bce_loss",
            format!(
                "logits {:?}, targets {:?}, mask {:?}",
                logits.shape(),
                targets.shape(),
                mask.shape()
            ),
        ));
    }
    Ok(mask.data().iter().filter(|&&m| m != 0.0).count())
}

/// Mean negative log-likelihood over active labels:
/// `-(1/|active|) * sum [y log s(z) + (1 - y) log(1 - s(z))]`, evaluated as
/// `softplus(z) - y z`. A mask entry of 0 removes the label; an all-masked
/// vector has zero loss.
pub fn bce_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<f64> {
    let active = check(logits, targets, mask)?;
    if active == 0 {
        return Ok(0.0);
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|((&z, &y), _)| softplus(z) - y * z)
        .sum();
    Ok(total / active as f64)
}

/// Gradient of [`bce_loss`] with respect to the logits.
pub fn bce_loss_backward(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let active = check(logits, targets, mask)?;
    let scale = if active == 0 { 0.0 } else { 1.0 / active as f64 };
    let data = logits
        .data()
        .iter()
        .zip(targets.data())
        .zip(mask.data())
        .map(|((&z, &y), &m)| if m != 0.0 { (sigmoid_scalar(z) - y) * scale } else { 0.0 })
        .collect();
    Tensor::new(logits.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_logit_costs_ln2() {
        let l = bce_loss(&t(&[0.0]), &t(&[1.0]), &t(&[1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn saturated_logit_costs_nothing() {
        let l = bce_loss(&t(&[30.0]), &t(&[1.0]), &t(&[1.0])).unwrap();
        assert!(l < 1e-12 && l >= 0.0);
    }

    #[test]
    fn matches_clamped_probability_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c = 7;
            let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let y: Vec<f64> = (0..c).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
            let m: Vec<f64> = (0..c).map(|_| rng.gen_bool(0.8) as u8 as f64).collect();
            let mut acc = 0.0;
            let mut n = 0;
            for l in 0..c {
                if m[l] == 0.0 {
                    continue;
                }
                let p = (1.0 / (1.0 + (-z[l]).exp())).clamp(1e-15, 1.0 - 1e-15);
                acc -= y[l] * p.ln() + (1.0 - y[l]) * (1.0 - p).ln();
                n += 1;
            }
            let want = if n == 0 { 0.0 } else { acc / n as f64 };
            let got = bce_loss(&t(&z), &t(&y), &t(&m)).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn masked_labels_do_not_contribute() {
        let full = bce_loss(&t(&[2.0, -9.0]), &t(&[1.0, 1.0]), &t(&[1.0, 0.0])).unwrap();
        let single = bce_loss(&t(&[2.0]), &t(&[1.0]), &t(&[1.0])).unwrap();
        assert_eq!(full, single);
        let g = bce_loss_backward(&t(&[2.0, -9.0]), &t(&[1.0, 1.0]), &t(&[1.0, 0.0])).unwrap();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(bce_loss(&t(&[1.0]), &t(&[0.0]), &t(&[0.0])).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(bce_loss(&t(&[0.0, 1.0]), &t(&[1.0]), &t(&[1.0, 1.0])).is_err());
    }
}
