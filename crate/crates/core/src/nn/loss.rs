use super::layer::softmax;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean categorical cross-entropy of `softmax(logits)` against one-hot rows.
///
/// Both tensors are `[B, K]`. Returns the batch-mean loss and its gradient
/// with respect to the logits, `(softmax(z) - y) / B`. Probabilities are
/// clipped to `[1e-12, 1]` inside the logarithm only.
pub fn softmax_cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Result<(f64, Tensor)> {
    let (b, k) = match logits.shape() {
        [b, k] if *b > 0 && *k > 0 => (*b, *k),
        s => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be [B, K], got {s:?}"),
            ))
        }
    };
    if one_hot.shape() != logits.shape() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!(
                "targets {:?} do not match logits {:?}",
                one_hot.shape(),
                logits.shape()
            ),
        ));
    }
    logits.ensure_finite("softmax_cross_entropy logits")?;
    let mut grad = Vec::with_capacity(b * k);
    let mut total = 0.0;
    for (z, y) in logits
        .data()
        .chunks_exact(k)
        .zip(one_hot.data().chunks_exact(k))
    {
        let row_sum: f64 = y.iter().sum();
        if (row_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "target row sums to {row_sum}, expected 1"
            )));
        }
        let p = softmax(z);
        total -= y
            .iter()
            .zip(&p)
            .map(|(yi, pi)| yi * pi.clamp(PROB_FLOOR, 1.0).ln())
            .sum::<f64>();
        grad.extend(p.iter().zip(y).map(|(pi, yi)| (pi - yi) / b as f64));
    }
    Ok((total / b as f64, Tensor::new(vec![b, k], grad)?))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("shape matches")
}
