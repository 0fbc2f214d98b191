use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean frame-level cross-entropy over the rows of `logits` (trailing axis
/// = classes) and its gradient `(softmax - onehot) / rows`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (rows, k) = (logits.rows(), logits.channels());
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            dim: "label count",
            expected: rows,
            actual: labels.len(),
        });
    }
    let inv = 1.0 / rows.max(1) as f64;
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    for (i, (&label, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                label,
                classes: k,
                frame: i,
            });
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[label].as_f64();
        for (j, (g, v)) in grad[i * k..(i + 1) * k].iter_mut().zip(row).enumerate() {
            let p = (v.as_f64() - log_z).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            *g = T::of((p - onehot) * inv);
        }
    }
    Ok((loss * inv, Tensor::from_vec(logits.shape(), grad)?))
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .data()
        .chunks(logits.channels())
        .map(|row| {
            (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random, rel_err, FD_STEP};

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, _) = cross_entropy(&Tensor::<f64>::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 30.0] {
            let logits = Tensor::<f64>::from_rows(&[vec![margin, 0.0, 0.0]]);
            let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let err = cross_entropy(&Tensor::<f32>::zeros(&[2, 3]), &[0, 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 3,
                classes: 3,
                frame: 1
            }
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = random::<f64>(&[3, 5], 9).map(|v| 2.0 * v);
        let labels = [4, 0, 2];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += FD_STEP;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= FD_STEP;
            let fd = (cross_entropy(&plus, &labels).unwrap().0 - cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * FD_STEP);
            assert!(
                rel_err(fd, grad.data()[i]) < 1e-6,
                "element {i}: {fd} vs {}",
                grad.data()[i]
            );
        }
    }
}
