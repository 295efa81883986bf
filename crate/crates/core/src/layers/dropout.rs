//! Inverted dropout.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Multiplicative mask with entries in `{0, 1/p_keep}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub mask: Tensor,
    pub p_keep: f64,
}

pub(crate) fn check_p_keep(p_keep: f64) -> Result<()> {
    if !(p_keep > 0.0 && p_keep <= 1.0) {
        return Err(Error::Argument(format!(
            "dropout keep probability must lie in (0, 1], got {p_keep}"
        )));
    }
    Ok(())
}

pub fn dropout_forward(input: &Tensor, p_keep: f64, rng: &mut Rng) -> Result<(Tensor, DropoutMask)> {
    check_p_keep(p_keep)?;
    let keep = 1.0 / p_keep;
    let mask = if p_keep == 1.0 {
        Tensor::full(input.shape(), 1.0)
    } else {
        Tensor::from_fn(input.shape(), |_| if rng.bernoulli(p_keep) { keep } else { 0.0 })
    };
    let output = input.zip_map(&mask, |x, m| x * m)?;
    Ok((output, DropoutMask { mask, p_keep }))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(&mask.mask, |g, m| g * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rand_normal;

    #[test]
    fn keep_all_is_identity() {
        let x = rand_normal(&mut Rng::new(1), &[3, 4], 0.0, 1.0).unwrap();
        let (y, m) = dropout_forward(&x, 1.0, &mut Rng::new(2)).unwrap();
        assert_eq!(y, x);
        assert!(m.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bad_probability() {
        let x = Tensor::zeros(&[2]);
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                dropout_forward(&x, p, &mut Rng::new(0)),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn mask_values_and_backward() {
        let x = Tensor::full(&[1000], 1.0);
        let (y, m) = dropout_forward(&x, 0.4, &mut Rng::new(3)).unwrap();
        assert!(m.mask.data().iter().all(|&v| v == 0.0 || v == 2.5));
        let g = dropout_backward(&m, &Tensor::full(&[1000], 1.0)).unwrap();
        for ((gy, yy), mm) in g.data().iter().zip(y.data()).zip(m.mask.data()) {
            assert_eq!(*gy == 0.0, *mm == 0.0);
            assert_eq!(gy, yy);
        }
    }

    #[test]
    fn expected_output_matches_input() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let mut rng = Rng::new(4);
        let trials = 10_000;
        let mut acc = Tensor::zeros(&[4]);
        for _ in 0..trials {
            let (y, _) = dropout_forward(&x, 0.5, &mut rng).unwrap();
            acc = acc.add(&y, false).unwrap();
        }
        let mean = acc.scale(1.0 / trials as f64);
        for (m, v) in mean.data().iter().zip(x.data()) {
            assert!((m - v).abs() <= 0.02 * v.abs() + 1e-12, "mean {m} vs {v}");
        }
    }
}
