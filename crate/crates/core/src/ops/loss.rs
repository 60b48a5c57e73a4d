use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean over the batch of `-log softmax(logits)[label]`, and its gradient
/// `(softmax - onehot) / N`. Logits are `(N, classes, 1, 1)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(T, Tensor4<T>)> {
    let (n, classes) = (logits.n(), logits.sample_len());
    if labels.len() != n {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("{} labels for a batch of {n}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    let inv_n = T::one() / T::lit(n.max(1) as f64);
    let mut grad = Tensor4::zeros(logits.dims())?;
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let g = grad.sample_mut(i);
        let mut denom = T::zero();
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - max).exp();
            denom = denom + *gv;
        }
        total = total + (denom.ln() - (row[label] - max));
        for gv in g.iter_mut() {
            *gv = *gv / denom * inv_n;
        }
        g[label] = g[label] - inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Number of rows whose arg-max differs from the label. Rows containing a
/// non-finite logit count as misclassified. Ties resolve to the lowest index.
pub fn count_errors<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = logits.sample(i);
            if !row.iter().all(|v| v.is_finite()) {
                return true;
            }
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best != label
        })
        .count()
}
