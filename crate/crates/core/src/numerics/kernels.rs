//! Tape-free numeric kernels shared by the forward and backward passes.

use crate::error::{Error, Result};

use super::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax of `logits + mask` over one row.
///
/// Entries whose mask is `-inf` never enter the max shift or the exponential
/// sum and come out as exact zeros.
pub fn masked_softmax_row(logits: &[f64], mask: &[f64], out: &mut [f64]) -> Option<()> {
    let mut max = f64::NEG_INFINITY;
    for (&l, &m) in logits.iter().zip(mask) {
        if m != f64::NEG_INFINITY {
            max = max.max(l + m);
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(mask) {
        if m == f64::NEG_INFINITY {
            *o = 0.0;
        } else {
            *o = (l + m - max).exp();
            sum += *o;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Some(())
}

/// Row-wise masked softmax over the last axis.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if logits.shape() != mask.shape() {
        return Err(Error::Dimension {
            op: "masked_softmax",
            lhs: logits.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let (rows, cols) = logits.dims2();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        masked_softmax_row(&logits.data()[span.clone()], &mask.data()[span.clone()], &mut out[span])
            .ok_or(Error::DegenerateRow { row: r })?;
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// `log(sum(exp(row)))` with a max shift.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax probability of `target` within one row of logits.
pub fn log_prob(row: &[f64], target: usize) -> Result<f64> {
    if target >= row.len() {
        return Err(Error::Index {
            index: target,
            extent: row.len(),
        });
    }
    Ok(row[target] - log_sum_exp(row))
}

/// `-log softmax(logits)[target]` for one vocabulary row.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    log_prob(logits, target).map(|lp| -lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_single_survivor() {
        let mut out = [0.0; 2];
        masked_softmax_row(&[1.0, 1.0], &[0.0, f64::NEG_INFINITY], &mut out).unwrap();
        assert_eq!(out, [1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_two_way() {
        let t = Tensor::vector(vec![0.0; 3]);
        let p = masked_softmax(&t, &Tensor::zeros(&[3])).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = masked_softmax(&Tensor::vector(vec![2.0, 1.0]), &Tensor::zeros(&[2])).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let ninf = f64::NEG_INFINITY;
        let logits = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let mask = Tensor::matrix(2, 2, vec![0.0, ninf, ninf, ninf]).unwrap();
        assert!(matches!(
            masked_softmax(&logits, &mask),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let saturated = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(saturated.is_finite() && saturated.abs() < 1e-12);
        // ln(e + e^2 + e^3) - 3
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let ce = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((ce - direct).abs() < 1e-12);
        assert!((ce - 0.407606).abs() < 1e-6);
        assert!(matches!(cross_entropy(&[0.0, 0.0], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn gelu_fixed_point_and_slope() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
